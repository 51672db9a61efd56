#pragma once

#include <map>
#include <string>
#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::metrics {

struct UnknownPatientError : Error {
    explicit UnknownPatientError(const std::string& what) : Error(what) {}
};

// One scored tissue micro-array image.
struct TmaScore {
    std::string tma_id;
    std::string patient_id;
    PiScore predicted;
};

// The five reporting intervals for expert PI, in percent. The last bin is
// closed at 100.
int pi_interval_bin(double expert_pi);
extern const char* const kPiIntervalNames[5];

struct PatientRow {
    std::string patient_id;
    double expert_pi = 0.0;
    double predicted_pi = 0.0;  // mean over the patient's TMAs
    double delta_pi = 0.0;
    int bin = 0;
    int tma_count = 0;
};

struct BinRow {
    int count = 0;
    double mean_delta_pi = 0.0;
};

struct PatientReport {
    std::vector<PatientRow> patients;  // sorted by patient_id
    BinRow bins[5];
    double mean_delta_pi = 0.0;
    double stddev_delta_pi = 0.0;  // sample stddev; 0 when only one patient
};

// Patient-level PI agreement: a patient's predicted PI is the mean over their
// TMAs, compared against the expert PI, binned by the expert value. Every TMA's
// patient must appear in expert_pi.
PatientReport patient_report(const std::vector<TmaScore>& tmas,
                             const std::map<std::string, double>& expert_pi);

}  // namespace ki67::metrics
