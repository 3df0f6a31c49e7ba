#pragma once

#include <optional>
#include <string>

#include "lungquant/preprocess.hpp"
#include "lungquant/volio.hpp"

namespace lungquant::quant {

// Per-scan volume and burden results in physical units.
struct QuantReport {
    std::string patient_id;
    double ggo_ml = 0;
    double high_opacity_ml = 0;
    double total_pneumonia_ml = 0;  // ggo + high-opacity (see docs: effusion caveat)
    std::optional<double> lung_ml;
    std::optional<double> burden_pct;  // 100 * pneumonia / lung
};

// (count of voxels with class_code) * voxel volume.
double class_volume(const volio::LabelMask& mask, volio::ClassCode class_code,
                    const volio::Spacing& spacing);

// 100 * (ggo + high-opacity) / lung volume; requires a non-empty lung plane.
double pneumonia_burden(const volio::LabelMask& mask);

QuantReport quantify(const volio::LabelMask& mask);

// Inverse of the crop+resize geometry: nearest-neighbor lookup of predicted
// labels for every source voxel inside the crop box; outside is background.
volio::LabelMask map_prediction_to_source(
    const Tensor<std::uint8_t>& pred,  // (slices, S, S) labels in resize space
    const prep::CropBox& crop_box, const volio::Shape3& source_shape,
    const volio::Spacing& spacing, const std::string& patient_id);

std::string quant_csv_header();
std::string quant_csv_row(const QuantReport& r);

}  // namespace lungquant::quant
