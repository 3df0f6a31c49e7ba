#pragma once

#include <cstdint>
#include <vector>

#include "lungquant/core/rng.hpp"
#include "lungquant/core/tensor.hpp"
#include "lungquant/volio.hpp"

namespace lungquant::prep {

// Half-open row/col box in source coordinates, shared by all slices.
struct CropBox {
    std::size_t row0 = 0, row1 = 0, col0 = 0, col1 = 0;
    std::size_t rows() const { return row1 - row0; }
    std::size_t cols() const { return col1 - col0; }
    bool operator==(const CropBox&) const = default;
};

struct PrepOptions {
    std::size_t target_size = 256;   // in-plane resolution after resize
    double body_threshold_hu = -500; // crop keeps the largest component above this
    std::size_t context_radius = 5;  // 5 slices above and below the target
};

// Normalized context stack centered on a target slice: (2r+1, S, S) in [0,1].
struct SliceWindow {
    Tensor<float> pixels;
    std::size_t target_index = 0;
    CropBox crop_box;
    double scale_y = 1.0, scale_x = 1.0;  // target/source resize factors
};

struct AugmentParams {
    double rotation_deg = 0;            // [-10, +10]
    double translate_x = 0;             // pixels, [-10, +10]
    double translate_y = 0;
    double scale = 1.0;                 // [0.9, 1.05]
    std::uint64_t seed = 0;

    void validate() const;
    static AugmentParams sample(Rng& rng);
    static AugmentParams identity() { return {}; }
};

// Tight bounding box (all slices) of the largest 6-connected component of
// voxels above the threshold, and the volume restricted to it.
// Throws DataError when nothing exceeds the threshold.
std::pair<CropBox, volio::CtVolume> body_crop(const volio::CtVolume& volume,
                                              double threshold_hu = -500);

// (clip(x, -1024, 600) + 1024) / 1624, elementwise.
float normalize_hu(float hu);
void normalize_slice(const float* hu, float* out, std::size_t n);

// Bilinear (images) / nearest (labels) plane resize with half-pixel centers.
void resize_plane_bilinear(const float* src, std::size_t in_h, std::size_t in_w,
                           float* dst, std::size_t out_h, std::size_t out_w);
void resize_plane_nearest(const std::uint8_t* src, std::size_t in_h, std::size_t in_w,
                          std::uint8_t* dst, std::size_t out_h, std::size_t out_w);

Tensor<float> resize_to_256(const Tensor<float>& slice);
Tensor<std::uint8_t> resize_label_to_256(const Tensor<std::uint8_t>& slice);

// Crop + resize + normalize, cached per volume. Window extraction then reads
// contiguous planes out of `planes`.
struct PreprocessedVolume {
    Tensor<float> planes;  // (slices, S, S), normalized
    CropBox crop_box;
    double scale_y = 1.0, scale_x = 1.0;
    volio::Shape3 source_shape;
};

PreprocessedVolume preprocess_volume(const volio::CtVolume& volume,
                                     const PrepOptions& opts);

// Target-space labels for the same geometry (nearest resize of each slice).
Tensor<std::uint8_t> preprocess_labels(const volio::LabelMask& mask,
                                       const CropBox& crop_box,
                                       std::size_t target_size);

// Window for one target index; context beyond the volume edge replicates the
// edge slice.
SliceWindow window_at(const PreprocessedVolume& pv, std::size_t target_index,
                      std::size_t context_radius = 5);

std::vector<SliceWindow> make_windows(const volio::CtVolume& volume,
                                      const std::vector<std::size_t>& indices,
                                      const PrepOptions& opts);

// Same affine transform (rotation about center, translation, scaling) applied
// to every context slice (bilinear, zero fill) and every label plane
// (nearest). Labels may be a single (h,w) plane or an (n,h,w) stack; they
// never gain classes absent from the input.
std::pair<SliceWindow, Tensor<std::uint8_t>> augment(
    const SliceWindow& window, const Tensor<std::uint8_t>& labels,
    const AugmentParams& params);

}  // namespace lungquant::prep
