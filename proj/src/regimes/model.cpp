#include "ki67/regimes/model.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

using nlohmann::json;

namespace ki67::regimes {

namespace {

template <typename T, typename L>
void he_init(L& layer, Rng& rng) {
    const double sigma = std::sqrt(2.0 / (layer.in_c * layer.k * layer.k));
    for (auto& w : layer.w) w = static_cast<T>(rng.normal(0.0, sigma));
    for (auto& b : layer.b) b = T(0);
}

template <typename T>
void relu(const Tensor<T>& z, Tensor<T>& a) {
    a = z;
    for (auto& v : a.v)
        if (v < T(0)) v = T(0);
}

template <typename T>
void sigmoid(const Tensor<T>& z, Tensor<T>& y) {
    y = z;
    for (auto& v : y.v) v = T(1) / (T(1) + std::exp(-v));
}

}  // namespace

template <typename T>
void MiniDetector<T>::init(std::uint64_t seed) {
    Rng rng(seed);
    he_init<T>(l1, rng);
    he_init<T>(l2, rng);
    he_init<T>(l3, rng);
    he_init<T>(l4, rng);
    // Heat-map peaks cover ~2% of pixels. Starting the output sigmoid at that
    // prior (instead of 0.5) spares the first epochs from pushing the whole
    // map down, which otherwise saturates the sparse positive channel so hard
    // it never recovers.
    for (auto& b : l4.b) b = T(-4);
}

template <typename T>
std::vector<T*> MiniDetector<T>::param_blocks() {
    return {l1.w.data(), l1.b.data(), l2.w.data(), l2.b.data(),
            l3.w.data(), l3.b.data(), l4.w.data(), l4.b.data()};
}

template <typename T>
std::vector<const T*> MiniDetector<T>::param_blocks() const {
    return {l1.w.data(), l1.b.data(), l2.w.data(), l2.b.data(),
            l3.w.data(), l3.b.data(), l4.w.data(), l4.b.data()};
}

template <typename T>
std::vector<std::size_t> MiniDetector<T>::param_sizes() const {
    return {l1.w.size(), l1.b.size(), l2.w.size(), l2.b.size(),
            l3.w.size(), l3.b.size(), l4.w.size(), l4.b.size()};
}

template <typename T>
std::vector<T> MiniDetector<T>::flatten() const {
    std::vector<T> flat;
    flat.reserve(param_count());
    const auto blocks = param_blocks();
    const auto sizes = param_sizes();
    for (std::size_t i = 0; i < blocks.size(); ++i)
        flat.insert(flat.end(), blocks[i], blocks[i] + sizes[i]);
    return flat;
}

template <typename T>
void MiniDetector<T>::unflatten(const std::vector<T>& flat) {
    if (flat.size() != param_count())
        throw ShapeMismatchError("unflatten: expected " + std::to_string(param_count()) +
                                 " parameters, got " + std::to_string(flat.size()));
    auto blocks = param_blocks();
    const auto sizes = param_sizes();
    std::size_t off = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        std::copy(flat.begin() + off, flat.begin() + off + sizes[i], blocks[i]);
        off += sizes[i];
    }
}

template <typename T>
void Gradients<T>::zero() {
    for (auto* l : {&l1, &l2, &l3, &l4}) {
        std::fill(l->w.begin(), l->w.end(), T(0));
        std::fill(l->b.begin(), l->b.end(), T(0));
    }
}

template <typename T>
void Gradients<T>::scale(T s) {
    for (auto* l : {&l1, &l2, &l3, &l4}) {
        for (auto& v : l->w) v *= s;
        for (auto& v : l->b) v *= s;
    }
}

template <typename T>
std::vector<T*> Gradients<T>::param_blocks() {
    return {l1.w.data(), l1.b.data(), l2.w.data(), l2.b.data(),
            l3.w.data(), l3.b.data(), l4.w.data(), l4.b.data()};
}

template <typename T>
std::vector<std::size_t> Gradients<T>::param_sizes() const {
    return {l1.w.size(), l1.b.size(), l2.w.size(), l2.b.size(),
            l3.w.size(), l3.b.size(), l4.w.size(), l4.b.size()};
}

template <typename T>
void forward(const MiniDetector<T>& m, const Tensor<T>& input, ForwardCache<T>& cache,
             kernels::Exec exec) {
    if (input.c != 3) throw ShapeMismatchError("forward: input must have 3 channels");
    const int h = input.h, w = input.w;
    cache.input = input;
    cache.z1 = Tensor<T>(8, h, w);
    kernels::conv2d_forward(input.v.data(), h, w, m.l1, cache.z1.v.data(), exec);
    relu(cache.z1, cache.a1);
    cache.z2 = Tensor<T>(16, h, w);
    kernels::conv2d_forward(cache.a1.v.data(), h, w, m.l2, cache.z2.v.data(), exec);
    relu(cache.z2, cache.a2);
    cache.z3 = Tensor<T>(8, h, w);
    kernels::conv2d_forward(cache.a2.v.data(), h, w, m.l3, cache.z3.v.data(), exec);
    relu(cache.z3, cache.a3);
    cache.z4 = Tensor<T>(2, h, w);
    kernels::conv2d_forward(cache.a3.v.data(), h, w, m.l4, cache.z4.v.data(), exec);
    sigmoid(cache.z4, cache.y);
}

template <typename T>
void backward(const MiniDetector<T>& m, const ForwardCache<T>& cache, const Tensor<T>& grad_y,
              Gradients<T>& g, kernels::Exec exec) {
    Tensor<T>::require_same_shape(grad_y, cache.y, "backward");
    const int h = cache.input.h, w = cache.input.w;

    Tensor<T> dz4 = grad_y;
    for (std::size_t i = 0; i < dz4.v.size(); ++i) {
        const T y = cache.y.v[i];
        dz4.v[i] *= y * (T(1) - y);
    }
    kernels::conv2d_backward_params(dz4.v.data(), cache.a3.v.data(), h, w, m.l4, g.l4.w.data(),
                                    g.l4.b.data(), exec);

    Tensor<T> dz3(8, h, w);
    kernels::conv2d_backward_input(dz4.v.data(), h, w, m.l4, dz3.v.data(), exec);
    for (std::size_t i = 0; i < dz3.v.size(); ++i)
        if (cache.z3.v[i] <= T(0)) dz3.v[i] = T(0);
    kernels::conv2d_backward_params(dz3.v.data(), cache.a2.v.data(), h, w, m.l3, g.l3.w.data(),
                                    g.l3.b.data(), exec);

    Tensor<T> dz2(16, h, w);
    kernels::conv2d_backward_input(dz3.v.data(), h, w, m.l3, dz2.v.data(), exec);
    for (std::size_t i = 0; i < dz2.v.size(); ++i)
        if (cache.z2.v[i] <= T(0)) dz2.v[i] = T(0);
    kernels::conv2d_backward_params(dz2.v.data(), cache.a1.v.data(), h, w, m.l2, g.l2.w.data(),
                                    g.l2.b.data(), exec);

    Tensor<T> dz1(8, h, w);
    kernels::conv2d_backward_input(dz2.v.data(), h, w, m.l2, dz1.v.data(), exec);
    for (std::size_t i = 0; i < dz1.v.size(); ++i)
        if (cache.z1.v[i] <= T(0)) dz1.v[i] = T(0);
    kernels::conv2d_backward_params(dz1.v.data(), cache.input.v.data(), h, w, m.l1, g.l1.w.data(),
                                    g.l1.b.data(), exec);
}

template <typename T>
std::array<double, 8> feature_descriptor(const MiniDetector<T>& m, const Tensor<T>& input,
                                         kernels::Exec exec) {
    ForwardCache<T> cache;
    forward(m, input, cache, exec);
    std::array<double, 8> f{};
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int c = 0; c < 8; ++c) {
        double s = 0.0;
        const T* p = cache.a3.plane(c);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        f[c] = s / static_cast<double>(plane);
    }
    return f;
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'K', 'I', '6', '7', 'M', 'D', 'L', '1'};

void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32le(std::string& out, float f) { put_u32le(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

void save_checkpoint(const std::string& path, const MiniDetector<float>& m,
                     const CheckpointMeta& meta) {
    json header;
    header["arch"] = meta.arch.empty() ? MiniDetector<float>::kArch : meta.arch;
    header["seed"] = meta.seed;
    header["regime"] = meta.regime;
    header["parent_hash"] = meta.parent_hash;
    const std::string hjson = header.dump();

    std::string out(kMagic, sizeof kMagic);
    put_u32le(out, static_cast<std::uint32_t>(hjson.size()));
    out += hjson;
    for (const float f : m.flatten()) put_f32le(out, f);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to '" + path + "'");
}

MiniDetector<float> load_checkpoint(const std::string& path, CheckpointMeta* meta) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw CheckpointError("'" + path + "' is not a model checkpoint");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t hlen = get_u32le(p + sizeof kMagic);
    const std::size_t tensors_at = sizeof kMagic + 4 + hlen;
    if (bytes.size() < tensors_at) throw CheckpointError("'" + path + "': truncated header");

    json header;
    try {
        header = json::parse(bytes.substr(sizeof kMagic + 4, hlen));
    } catch (const json::exception& e) {
        throw CheckpointError("'" + path + "': bad header: " + e.what());
    }
    const std::string arch = header.value("arch", "");
    if (arch != MiniDetector<float>::kArch)
        throw CheckpointError("'" + path + "': architecture '" + arch + "' not supported");
    if (meta) {
        meta->arch = arch;
        meta->seed = header.value("seed", std::uint64_t(0));
        meta->regime = header.value("regime", "");
        meta->parent_hash = header.value("parent_hash", "");
    }

    MiniDetector<float> m;
    const std::size_t want = m.param_count() * 4;
    if (bytes.size() - tensors_at != want)
        throw CheckpointError("'" + path + "': expected " + std::to_string(want) +
                              " tensor bytes, found " + std::to_string(bytes.size() - tensors_at));
    std::vector<float> flat(m.param_count());
    for (std::size_t i = 0; i < flat.size(); ++i)
        flat[i] = std::bit_cast<float>(get_u32le(p + tensors_at + i * 4));
    m.unflatten(flat);
    return m;
}

std::string checkpoint_hash(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

#define KI67_INSTANTIATE(T)                                                                     \
    template struct MiniDetector<T>;                                                            \
    template struct Gradients<T>;                                                               \
    template void forward<T>(const MiniDetector<T>&, const Tensor<T>&, ForwardCache<T>&,        \
                             kernels::Exec);                                                    \
    template void backward<T>(const MiniDetector<T>&, const ForwardCache<T>&, const Tensor<T>&, \
                              Gradients<T>&, kernels::Exec);                                    \
    template std::array<double, 8> feature_descriptor<T>(const MiniDetector<T>&,                \
                                                         const Tensor<T>&, kernels::Exec);

KI67_INSTANTIATE(float)
KI67_INSTANTIATE(double)
#undef KI67_INSTANTIATE

}  // namespace ki67::regimes
