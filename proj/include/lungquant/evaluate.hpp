#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lungquant/quantify.hpp"
#include "lungquant/stats.hpp"
#include "lungquant/volio.hpp"

namespace lungquant::eval {

// 2TP / (2TP + FP + FN) over voxels of one class. Both masks empty for the
// class -> 1.0 (agreement on absence); exactly one empty -> 0.0.
double dice(const volio::LabelMask& pred, const volio::LabelMask& gt,
            volio::ClassCode class_code);

// Agreement statistics for one volume type (predicted vs truth). Fields are
// absent when their preconditions fail (constant input, all-zero diffs, n
// too small).
struct VolumeAgreement {
    std::optional<stats::Spearman> spearman;
    std::optional<stats::BlandAltman> bland_altman;
    std::optional<double> wilcoxon_p;
    std::vector<std::pair<double, double>> scatter;  // (truth, predicted)
};

struct PatientEval {
    std::string patient_id;
    std::array<double, volio::kNumClasses> dice{};  // BG, GGO, high-opacity
    double lesion_dice = 1.0;  // mean over lesion classes present in the pair
    quant::QuantReport pred;
    quant::QuantReport truth;
};

inline constexpr std::array<const char*, 3> kVolumeNames{"ggo_ml", "high_ml",
                                                         "pneumonia_ml"};
inline constexpr double kPThreshold = 0.05;

struct EvalReport {
    std::size_t n_patients = 0;
    std::array<stats::MeanSd, volio::kNumClasses> dice_per_class;
    stats::MeanSd lesion_dice;
    std::array<VolumeAgreement, 3> volumes;  // indexed like kVolumeNames
    std::vector<PatientEval> patients;
};

// Pairs masks positionally; patient ids and shapes must line up.
EvalReport build_report(const std::vector<volio::LabelMask>& pred_masks,
                        const std::vector<volio::LabelMask>& gt_masks);

// Per-patient rows (dice + predicted/truth volumes).
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
// Aggregate statistics, annotated against the 0.05 significance threshold.
void write_summary_json(const EvalReport& report, const std::filesystem::path& path);
// `volume_type,mean,diff` rows for Bland-Altman plotting.
void write_ba_points_csv(const EvalReport& report, const std::filesystem::path& path);
// `volume_type,truth,predicted` rows for correlation plotting.
void write_scatter_points_csv(const EvalReport& report,
                              const std::filesystem::path& path);
// Minimal self-contained SVG renderings of the same plot data.
void write_scatter_svg(const EvalReport& report, const std::filesystem::path& path);
void write_ba_svg(const EvalReport& report, const std::filesystem::path& path);

}  // namespace lungquant::eval
