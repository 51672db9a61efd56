#include "ki67/regimes/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ki67/regimes/infer.hpp"

namespace ki67::regimes {

void TrainConfig::validate() const {
    if (epochs < 0) throw Error("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
    if (learning_rate <= 0) throw Error("TrainConfig: learning_rate must be positive");
    if (huber_delta <= 0) throw Error("TrainConfig: huber_delta must be positive");
    if (validation_fraction < 0 || validation_fraction >= 1)
        throw Error("TrainConfig: validation_fraction must be in [0,1)");
}

namespace {

RgbImage rot90_cw(const RgbImage& in) {
    RgbImage out(in.height, in.width);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = in.at(y, in.height - 1 - x, c);
    return out;
}

std::vector<float> rot90_cw(const std::vector<float>& in, int w, int h) {
    // output is h x w (width h)
    std::vector<float> out(in.size());
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < h; ++x)
            out[static_cast<std::size_t>(y) * h + x] =
                in[static_cast<std::size_t>(h - 1 - x) * w + y];
    return out;
}

float bilinear_clamped(const RgbImage& img, float sx, float sy, int c) {
    const float u = sx - 0.5f, v = sy - 0.5f;
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const float fx = u - x0, fy = v - y0;
    auto px = [&](int x, int y) {
        return static_cast<float>(img.at(std::clamp(x, 0, img.width - 1),
                                         std::clamp(y, 0, img.height - 1), c));
    };
    return (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
           (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1);
}

float bilinear_zero(const std::vector<float>& ch, int w, int h, float sx, float sy) {
    const float u = sx - 0.5f, v = sy - 0.5f;
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const float fx = u - x0, fy = v - y0;
    auto px = [&](int x, int y) {
        if (x < 0 || x >= w || y < 0 || y >= h) return 0.f;
        return ch[static_cast<std::size_t>(y) * w + x];
    };
    return (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
           (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1);
}

}  // namespace

labels::LabeledPatch apply_augment(const labels::LabeledPatch& item, int rot_quarters,
                                   float scale) {
    if (rot_quarters < 0 || rot_quarters > 3)
        throw Error("apply_augment: rot_quarters must be in {0,1,2,3}");
    if (scale < 0.8f || scale > 1.2f) throw Error("apply_augment: scale must be in [0.8, 1.2]");

    labels::LabeledPatch out = item;
    for (int k = 0; k < rot_quarters; ++k) {
        const int w = out.image.width, h = out.image.height;
        out.image = rot90_cw(out.image);
        out.label.neg = rot90_cw(out.label.neg, w, h);
        out.label.pos = rot90_cw(out.label.pos, w, h);
        out.label.width = h;
        out.label.height = w;
    }
    if (scale == 1.f) return out;  // exact pass-through apart from rotation

    const int w = out.image.width, h = out.image.height;
    const float cx = w * 0.5f, cy = h * 0.5f;
    labels::LabeledPatch scaled = out;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float sx = cx + ((x + 0.5f) - cx) / scale;
            const float sy = cy + ((y + 0.5f) - cy) / scale;
            for (int c = 0; c < 3; ++c)
                scaled.image.at(x, y, c) = static_cast<std::uint8_t>(
                    std::lround(std::clamp(bilinear_clamped(out.image, sx, sy, c), 0.f, 255.f)));
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            scaled.label.neg[i] = bilinear_zero(out.label.neg, w, h, sx, sy);
            scaled.label.pos[i] = bilinear_zero(out.label.pos, w, h, sx, sy);
        }
    return scaled;
}

labels::LabeledPatch augment(const labels::LabeledPatch& item, Rng& rng) {
    const int k = static_cast<int>(rng.below(4));
    const float s = static_cast<float>(rng.uniform(0.8, 1.2));
    return apply_augment(item, k, s);
}

TrainResult train(const MiniDetector<float>& init, const std::vector<labels::LabeledPatch>& data,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw EmptyDatasetError("train: dataset is empty");

    TrainResult res;
    res.model = init;
    if (cfg.epochs == 0) return res;

    Rng rng(cfg.seed);
    const int n = static_cast<int>(data.size());
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    int n_val = 0;
    if (n >= 2)
        n_val = static_cast<int>(
            std::clamp<long>(std::lround(cfg.validation_fraction * n), 1, n - 1));
    const std::vector<int> val_idx(idx.begin(), idx.begin() + n_val);
    std::vector<int> train_idx(idx.begin() + n_val, idx.end());

    AdamConfig adam_cfg{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
    AdamState<float> adam(res.model.param_count());
    Gradients<float> grads;
    std::vector<float> flat_g(res.model.param_count());

    ForwardCache<float> cache;
    Tensor<float> grad_y;
    double best_val = 0.0;
    std::vector<float> best_flat;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train_idx);
        double train_sum = 0.0;
        for (std::size_t b = 0; b < train_idx.size(); b += cfg.batch_size) {
            const std::size_t bend = std::min(train_idx.size(), b + cfg.batch_size);
            grads.zero();
            for (std::size_t s = b; s < bend; ++s) {
                const auto sample = augment(data[train_idx[s]], rng);
                const Tensor<float> input = image_to_tensor(sample.image);
                forward(res.model, input, cache);
                Tensor<float> target(2, input.h, input.w);
                std::copy(sample.label.neg.begin(), sample.label.neg.end(), target.plane(0));
                std::copy(sample.label.pos.begin(), sample.label.pos.end(), target.plane(1));
                train_sum += huber_loss(cache.y, target, cfg.huber_delta, grad_y);
                backward(res.model, cache, grad_y, grads);
            }
            grads.scale(1.f / static_cast<float>(bend - b));
            const auto gb = grads.param_blocks();
            const auto gs = grads.param_sizes();
            std::size_t off = 0;
            for (std::size_t i = 0; i < gb.size(); ++i) {
                std::copy(gb[i], gb[i] + gs[i], flat_g.begin() + off);
                off += gs[i];
            }
            auto flat_p = res.model.flatten();
            adam_step(flat_p.data(), flat_g.data(), flat_p.size(), adam, adam_cfg);
            res.model.unflatten(flat_p);
        }
        res.train_loss.push_back(train_idx.empty() ? 0.0
                                                   : train_sum / static_cast<double>(train_idx.size()));

        double val_sum = 0.0;
        for (const int i : val_idx) {
            const Tensor<float> input = image_to_tensor(data[i].image);
            forward(res.model, input, cache);
            Tensor<float> target(2, input.h, input.w);
            std::copy(data[i].label.neg.begin(), data[i].label.neg.end(), target.plane(0));
            std::copy(data[i].label.pos.begin(), data[i].label.pos.end(), target.plane(1));
            val_sum += huber_loss(cache.y, target, cfg.huber_delta, grad_y);
        }
        const double val =
            val_idx.empty() ? res.train_loss.back() : val_sum / static_cast<double>(val_idx.size());
        res.val_loss.push_back(val);
        if (res.best_epoch < 0 || val < best_val) {
            best_val = val;
            res.best_epoch = epoch;
            best_flat = res.model.flatten();
        }
    }
    res.model.unflatten(best_flat);
    return res;
}

const char* to_string(Regime r) {
    switch (r) {
        case Regime::GsOnly: return "gs_only";
        case Regime::SsOnly: return "ss_only";
        case Regime::Mixed: return "mixed";
        case Regime::GsThenSs: return "gs_ss";
        case Regime::SsThenGs: return "ss_gs";
    }
    return "?";
}

std::optional<Regime> regime_from_string(const std::string& s) {
    if (s == "gs_only") return Regime::GsOnly;
    if (s == "ss_only") return Regime::SsOnly;
    if (s == "mixed") return Regime::Mixed;
    if (s == "gs_ss") return Regime::GsThenSs;
    if (s == "ss_gs") return Regime::SsThenGs;
    return std::nullopt;
}

TrainResult run_regime(Regime r, const std::vector<labels::LabeledPatch>& gs,
                       const std::vector<labels::LabeledPatch>& ss, const TrainConfig& cfg,
                       const TrainConfig* fine_tune) {
    const bool needs_gs = r != Regime::SsOnly;
    const bool needs_ss = r != Regime::GsOnly;
    if (needs_gs && gs.empty())
        throw MissingDatasetError(std::string("run_regime: ") + to_string(r) +
                                  " needs a gold-standard dataset");
    if (needs_ss && ss.empty())
        throw MissingDatasetError(std::string("run_regime: ") + to_string(r) +
                                  " needs a silver-standard dataset");

    MiniDetector<float> model;
    model.init(cfg.seed ^ fnv1a64("init"));

    auto two_stage = [&](const std::vector<labels::LabeledPatch>& first,
                         const std::vector<labels::LabeledPatch>& second) {
        TrainResult r1 = train(model, first, cfg);
        TrainConfig cfg2 = fine_tune ? *fine_tune : cfg;
        cfg2.seed = cfg2.seed ^ fnv1a64("stage2");
        TrainResult r2 = train(r1.model, second, cfg2);
        TrainResult out;
        out.model = r2.model;
        out.train_loss = r1.train_loss;
        out.train_loss.insert(out.train_loss.end(), r2.train_loss.begin(), r2.train_loss.end());
        out.val_loss = r1.val_loss;
        out.val_loss.insert(out.val_loss.end(), r2.val_loss.begin(), r2.val_loss.end());
        out.best_epoch = r2.best_epoch >= 0
                             ? static_cast<int>(r1.train_loss.size()) + r2.best_epoch
                             : r1.best_epoch;
        return out;
    };

    switch (r) {
        case Regime::GsOnly: return train(model, gs, cfg);
        case Regime::SsOnly: return train(model, ss, cfg);
        case Regime::Mixed: {
            std::vector<labels::LabeledPatch> both = gs;
            both.insert(both.end(), ss.begin(), ss.end());
            return train(model, both, cfg);
        }
        case Regime::GsThenSs: return two_stage(gs, ss);
        case Regime::SsThenGs: return two_stage(ss, gs);
    }
    throw Error("run_regime: unknown regime");
}

CrossValidation make_folds(int n, int folds, std::uint64_t seed) {
    if (folds < 2) throw Error("make_folds: folds must be >= 2");
    if (n < folds)
        throw TooFewSamplesError("make_folds: " + std::to_string(n) + " samples for " +
                                 std::to_string(folds) + " folds");
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    CrossValidation cv;
    cv.fold_indices.assign(folds, {});
    for (int i = 0; i < n; ++i) cv.fold_indices[i % folds].push_back(idx[i]);
    for (auto& f : cv.fold_indices) std::sort(f.begin(), f.end());
    return cv;
}

}  // namespace ki67::regimes
