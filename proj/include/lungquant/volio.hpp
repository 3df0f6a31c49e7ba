#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lungquant/core/tensor.hpp"

namespace lungquant::volio {

// Class codes of LabelMask voxels.
enum ClassCode : std::uint8_t {
    kBackground = 0,
    kGgo = 1,         // ground-glass opacity
    kHighOpacity = 2  // consolidation + pleural effusion, one merged class
};
inline constexpr int kNumClasses = 3;

// Scanner-representable HU range; files outside it are rejected.
inline constexpr int kHuMin = -3024;
inline constexpr int kHuMax = 3071;

struct Spacing {
    double dz = 1.0;  // slice thickness, mm
    double dy = 1.0;
    double dx = 1.0;
    bool valid() const;
};

struct Shape3 {
    std::size_t slices = 0, rows = 0, cols = 0;
    bool operator==(const Shape3&) const = default;
    std::size_t count() const { return slices * rows * cols; }
};

// 3D grid of Hounsfield samples, slice-major, with physical voxel spacing.
struct CtVolume {
    Tensor<std::int16_t> voxels;  // (slices, rows, cols)
    Spacing spacing;
    std::string patient_id;

    Shape3 shape() const;
    void validate() const;  // throws DataError on any invariant violation
};

// Per-voxel class labels over {background, GGO, high-opacity}; optionally a
// lung mask on the same grid.
struct LabelMask {
    Tensor<std::uint8_t> labels;  // (slices, rows, cols), values in {0,1,2}
    std::optional<Tensor<std::uint8_t>> lung;  // values in {0,1}
    Spacing spacing;  // copied from the paired volume so masks quantify alone
    std::string patient_id;

    Shape3 shape() const;
    void validate() const;
};

struct DatasetRecord {
    std::string patient_id;
    std::filesystem::path volume_path;
    std::filesystem::path mask_path;
};

struct Dataset {
    std::vector<DatasetRecord> records;
    std::filesystem::path manifest_path;
};

// Container I/O. Byte layout documented in docs/formats.md; round-trips are
// bit-exact.
CtVolume load_volume(const std::filesystem::path& path);
void save_volume(const CtVolume& volume, const std::filesystem::path& path);

LabelMask load_mask(const std::filesystem::path& path, const Shape3& expected_shape);
LabelMask load_mask(const std::filesystem::path& path);  // shape taken from header
void save_mask(const LabelMask& mask, const std::filesystem::path& path);

// dz*dy*dx in mm^3, converted to milliliters.
double voxel_volume_ml(const Spacing& spacing);

// Manifest: one record per line, `patient_id<TAB>volume_path<TAB>mask_path`.
// Relative paths are resolved against the manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest_path);
void save_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path);

}  // namespace lungquant::volio
