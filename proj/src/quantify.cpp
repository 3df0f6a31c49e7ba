#include "lungquant/quantify.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>

#include "lungquant/core/errors.hpp"

namespace lungquant::quant {

namespace {

std::array<std::size_t, volio::kNumClasses> class_counts(
    const Tensor<std::uint8_t>& labels) {
    std::array<std::size_t, volio::kNumClasses> counts{};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::uint8_t v = labels[i];
        if (v >= volio::kNumClasses) throw DataError("unknown class code in mask");
        ++counts[v];
    }
    return counts;
}

std::string fmt_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

}  // namespace

double class_volume(const volio::LabelMask& mask, volio::ClassCode class_code,
                    const volio::Spacing& spacing) {
    if (class_code >= volio::kNumClasses) throw DataError("unknown class code");
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.labels.size(); ++i)
        if (mask.labels[i] == class_code) ++count;
    return double(count) * volio::voxel_volume_ml(spacing);
}

double pneumonia_burden(const volio::LabelMask& mask) {
    if (!mask.lung) throw DataError("pneumonia burden requires a lung mask");
    std::size_t lung_count = 0;
    for (std::size_t i = 0; i < mask.lung->size(); ++i)
        if ((*mask.lung)[i]) ++lung_count;
    if (lung_count == 0) throw DataError("empty lung mask");
    auto counts = class_counts(mask.labels);
    // identical voxel volume cancels, so work in counts directly
    return 100.0 * double(counts[volio::kGgo] + counts[volio::kHighOpacity]) /
           double(lung_count);
}

QuantReport quantify(const volio::LabelMask& mask) {
    QuantReport r;
    r.patient_id = mask.patient_id;
    const double vol = volio::voxel_volume_ml(mask.spacing);
    auto counts = class_counts(mask.labels);
    r.ggo_ml = double(counts[volio::kGgo]) * vol;
    r.high_opacity_ml = double(counts[volio::kHighOpacity]) * vol;
    r.total_pneumonia_ml = r.ggo_ml + r.high_opacity_ml;
    if (mask.lung) {
        std::size_t lung_count = 0;
        for (std::size_t i = 0; i < mask.lung->size(); ++i)
            if ((*mask.lung)[i]) ++lung_count;
        r.lung_ml = double(lung_count) * vol;
        if (lung_count == 0) throw DataError("empty lung mask");
        r.burden_pct = 100.0 * double(counts[volio::kGgo] + counts[volio::kHighOpacity]) /
                       double(lung_count);
    }
    return r;
}

volio::LabelMask map_prediction_to_source(const Tensor<std::uint8_t>& pred,
                                          const prep::CropBox& crop_box,
                                          const volio::Shape3& source_shape,
                                          const volio::Spacing& spacing,
                                          const std::string& patient_id) {
    const std::size_t nz = source_shape.slices;
    const std::size_t ny = source_shape.rows, nx = source_shape.cols;
    const std::size_t ch = crop_box.rows(), cw = crop_box.cols();
    if (ch == 0 || cw == 0 || crop_box.row1 > ny || crop_box.col1 > nx)
        throw DataError("crop box inconsistent with source shape");
    if (pred.rank() != 3 || pred.dim(0) != nz)
        throw DataError("prediction slice count inconsistent with source shape");
    const std::size_t sh = pred.dim(1), sw = pred.dim(2);

    volio::LabelMask out;
    out.spacing = spacing;
    out.patient_id = patient_id;
    out.labels.resize({nz, ny, nx});
    out.labels.zero();

    // nearest resize-space sample for each cropped source pixel
    std::vector<std::size_t> col_of(cw), row_of(ch);
    for (std::size_t y = 0; y < ch; ++y) {
        long r = std::lround((double(y) + 0.5) * double(sh) / double(ch) - 0.5);
        row_of[y] = std::size_t(std::clamp(r, 0L, long(sh - 1)));
    }
    for (std::size_t x = 0; x < cw; ++x) {
        long c = std::lround((double(x) + 0.5) * double(sw) / double(cw) - 0.5);
        col_of[x] = std::size_t(std::clamp(c, 0L, long(sw - 1)));
    }
    for (std::size_t z = 0; z < nz; ++z) {
        const std::uint8_t* plane = pred.data() + z * sh * sw;
        for (std::size_t y = 0; y < ch; ++y) {
            std::uint8_t* dst =
                out.labels.data() + (z * ny + crop_box.row0 + y) * nx + crop_box.col0;
            const std::uint8_t* src_row = plane + row_of[y] * sw;
            for (std::size_t x = 0; x < cw; ++x) dst[x] = src_row[col_of[x]];
        }
    }
    return out;
}

std::string quant_csv_header() {
    return "patient_id,ggo_ml,high_ml,pneumonia_ml,lung_ml,burden_pct";
}

std::string quant_csv_row(const QuantReport& r) {
    std::string row = r.patient_id;
    row += ',';
    row += fmt_double(r.ggo_ml);
    row += ',';
    row += fmt_double(r.high_opacity_ml);
    row += ',';
    row += fmt_double(r.total_pneumonia_ml);
    row += ',';
    if (r.lung_ml) row += fmt_double(*r.lung_ml);
    row += ',';
    if (r.burden_pct) row += fmt_double(*r.burden_pct);
    return row;
}

}  // namespace lungquant::quant
