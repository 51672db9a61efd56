#include "ki67/metrics/report.hpp"

#include <algorithm>
#include <cmath>

#include "ki67/metrics/stats.hpp"

namespace ki67::metrics {

const char* const kPiIntervalNames[5] = {"0-10", "10-20", "20-30", "30-40", "40-100"};

int pi_interval_bin(double expert_pi) {
    if (expert_pi < 0.0 || expert_pi > 100.0) throw Error("pi_interval_bin: PI outside [0,100]");
    if (expert_pi < 10.0) return 0;
    if (expert_pi < 20.0) return 1;
    if (expert_pi < 30.0) return 2;
    if (expert_pi < 40.0) return 3;
    return 4;
}

PatientReport patient_report(const std::vector<TmaScore>& tmas,
                             const std::map<std::string, double>& expert_pi) {
    if (tmas.empty()) throw Error("patient_report: no TMA scores");
    std::map<std::string, std::vector<double>> per_patient;
    for (const auto& t : tmas) {
        if (!expert_pi.count(t.patient_id))
            throw UnknownPatientError("patient_report: TMA '" + t.tma_id +
                                      "' references unknown patient '" + t.patient_id + "'");
        per_patient[t.patient_id].push_back(t.predicted.value);
    }

    PatientReport rep;
    std::vector<double> deltas;
    for (const auto& [pid, values] : per_patient) {
        PatientRow row;
        row.patient_id = pid;
        row.expert_pi = expert_pi.at(pid);
        row.predicted_pi = mean(values);
        row.delta_pi = std::fabs(row.expert_pi - row.predicted_pi);
        row.bin = pi_interval_bin(row.expert_pi);
        row.tma_count = static_cast<int>(values.size());
        rep.patients.push_back(row);
        deltas.push_back(row.delta_pi);
    }

    for (int b = 0; b < 5; ++b) rep.bins[b] = BinRow{};
    for (const auto& row : rep.patients) {
        rep.bins[row.bin].count += 1;
        rep.bins[row.bin].mean_delta_pi += row.delta_pi;
    }
    for (int b = 0; b < 5; ++b)
        if (rep.bins[b].count > 0) rep.bins[b].mean_delta_pi /= rep.bins[b].count;

    rep.mean_delta_pi = mean(deltas);
    rep.stddev_delta_pi = deltas.size() >= 2 ? sample_stddev(deltas) : 0.0;
    return rep;
}

}  // namespace ki67::metrics
