#include "lungquant/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "lungquant/core/errors.hpp"

namespace lungquant::prep {

namespace {

constexpr float kClipLo = -1024.0f;
constexpr float kClipHi = 600.0f;
constexpr float kClipRange = kClipHi - kClipLo;  // 1624

struct Affine {
    // source = M * (out - center) + center, row-major 2x2 + offset
    double m00, m01, m10, m11;
    double cx, cy;
    double tx, ty;

    void map(double xo, double yo, double& xs, double& ys) const {
        double px = xo - cx - tx;
        double py = yo - cy - ty;
        xs = m00 * px + m01 * py + cx;
        ys = m10 * px + m11 * py + cy;
    }
};

// Inverse of: rotate about center, translate, then scale about center.
Affine inverse_affine(const AugmentParams& p, std::size_t h, std::size_t w) {
    double th = p.rotation_deg * 3.14159265358979323846 / 180.0;
    double c = std::cos(th), s = std::sin(th);
    double inv_scale = 1.0 / p.scale;
    Affine a;
    // R^-1 * (p/s - t): fold 1/s into the rotation, translation separate
    a.m00 = c * inv_scale;
    a.m01 = s * inv_scale;
    a.m10 = -s * inv_scale;
    a.m11 = c * inv_scale;
    a.cx = 0.5 * (double(w) - 1.0);
    a.cy = 0.5 * (double(h) - 1.0);
    a.tx = p.translate_x * p.scale;  // applied before the un-scale
    a.ty = p.translate_y * p.scale;
    return a;
}

float bilinear_at(const float* img, std::size_t h, std::size_t w, double x, double y) {
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto px = [&](int yy, int xx) -> double {
        if (yy < 0 || xx < 0 || yy >= int(h) || xx >= int(w)) return 0.0;
        return img[std::size_t(yy) * w + std::size_t(xx)];
    };
    double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
               fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
    return float(v);
}

std::uint8_t nearest_at(const std::uint8_t* img, std::size_t h, std::size_t w,
                        double x, double y) {
    long xi = std::lround(x), yi = std::lround(y);
    if (yi < 0 || xi < 0 || yi >= long(h) || xi >= long(w)) return 0;
    return img[std::size_t(yi) * w + std::size_t(xi)];
}

}  // namespace

void AugmentParams::validate() const {
    if (rotation_deg < -10.0 || rotation_deg > 10.0)
        throw DataError("augment rotation outside [-10, +10] degrees");
    if (translate_x < -10.0 || translate_x > 10.0 || translate_y < -10.0 ||
        translate_y > 10.0)
        throw DataError("augment translation outside [-10, +10] pixels");
    if (scale < 0.9 || scale > 1.05)
        throw DataError("augment scale outside [0.9, 1.05]");
}

AugmentParams AugmentParams::sample(Rng& rng) {
    AugmentParams p;
    p.rotation_deg = rng.uniform(-10.0, 10.0);
    p.translate_x = rng.uniform(-10.0, 10.0);
    p.translate_y = rng.uniform(-10.0, 10.0);
    p.scale = rng.uniform(0.9, 1.05);
    return p;
}

std::pair<CropBox, volio::CtVolume> body_crop(const volio::CtVolume& volume,
                                              double threshold_hu) {
    const auto& vox = volume.voxels;
    const std::size_t nz = vox.dim(0), ny = vox.dim(1), nx = vox.dim(2);
    const std::size_t n = vox.size();

    std::vector<std::uint8_t> above(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        above[i] = vox[i] > threshold_hu;
        any = any || above[i];
    }
    if (!any) throw DataError("no body found: no voxel above crop threshold");

    // largest 6-connected component, BFS with int32 component ids
    std::vector<std::int32_t> comp(n, -1);
    std::int32_t ncomp = 0;
    std::size_t best_count = 0;
    std::int32_t best = -1;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n; ++start) {
        if (!above[start] || comp[start] != -1) continue;
        std::int32_t id = ncomp++;
        std::size_t count = 0;
        stack.clear();
        stack.push_back(start);
        comp[start] = id;
        while (!stack.empty()) {
            std::size_t i = stack.back();
            stack.pop_back();
            ++count;
            std::size_t z = i / (ny * nx), rem = i % (ny * nx);
            std::size_t y = rem / nx, x = rem % nx;
            auto visit = [&](std::size_t j) {
                if (above[j] && comp[j] == -1) {
                    comp[j] = id;
                    stack.push_back(j);
                }
            };
            if (z > 0) visit(i - ny * nx);
            if (z + 1 < nz) visit(i + ny * nx);
            if (y > 0) visit(i - nx);
            if (y + 1 < ny) visit(i + nx);
            if (x > 0) visit(i - 1);
            if (x + 1 < nx) visit(i + 1);
        }
        if (count > best_count) {
            best_count = count;
            best = id;
        }
    }

    std::size_t r0 = ny, r1 = 0, c0 = nx, c1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (comp[i] != best) continue;
        std::size_t rem = i % (ny * nx);
        std::size_t y = rem / nx, x = rem % nx;
        r0 = std::min(r0, y);
        r1 = std::max(r1, y + 1);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x + 1);
    }
    CropBox box{r0, r1, c0, c1};

    volio::CtVolume cropped;
    cropped.spacing = volume.spacing;
    cropped.patient_id = volume.patient_id;
    cropped.voxels.resize({nz, box.rows(), box.cols()});
    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < box.rows(); ++y)
            for (std::size_t x = 0; x < box.cols(); ++x)
                cropped.voxels.at(z, y, x) = vox.at(z, r0 + y, c0 + x);
    return {box, std::move(cropped)};
}

float normalize_hu(float hu) {
    float c = std::clamp(hu, kClipLo, kClipHi);
    return (c - kClipLo) / kClipRange;
}

void normalize_slice(const float* hu, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normalize_hu(hu[i]);
}

void resize_plane_bilinear(const float* src, std::size_t in_h, std::size_t in_w,
                           float* dst, std::size_t out_h, std::size_t out_w) {
    if (in_h < 2 || in_w < 2) throw DataError("resize input must be at least 2x2");
    double sy = double(in_h) / double(out_h);
    double sx = double(in_w) / double(out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
        double yf = (double(r) + 0.5) * sy - 0.5;
        yf = std::clamp(yf, 0.0, double(in_h - 1));
        std::size_t y0 = std::size_t(yf);
        if (y0 + 1 >= in_h) y0 = in_h - 2;
        double wy = yf - double(y0);
        for (std::size_t c = 0; c < out_w; ++c) {
            double xf = (double(c) + 0.5) * sx - 0.5;
            xf = std::clamp(xf, 0.0, double(in_w - 1));
            std::size_t x0 = std::size_t(xf);
            if (x0 + 1 >= in_w) x0 = in_w - 2;
            double wx = xf - double(x0);
            const float* row0 = src + y0 * in_w;
            const float* row1 = row0 + in_w;
            double v = (1 - wy) * ((1 - wx) * row0[x0] + wx * row0[x0 + 1]) +
                       wy * ((1 - wx) * row1[x0] + wx * row1[x0 + 1]);
            dst[r * out_w + c] = float(v);
        }
    }
}

void resize_plane_nearest(const std::uint8_t* src, std::size_t in_h, std::size_t in_w,
                          std::uint8_t* dst, std::size_t out_h, std::size_t out_w) {
    if (in_h < 1 || in_w < 1) throw DataError("resize input must be non-empty");
    double sy = double(in_h) / double(out_h);
    double sx = double(in_w) / double(out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
        double yf = (double(r) + 0.5) * sy - 0.5;
        long yi = std::lround(yf);
        yi = std::clamp(yi, 0L, long(in_h - 1));
        for (std::size_t c = 0; c < out_w; ++c) {
            double xf = (double(c) + 0.5) * sx - 0.5;
            long xi = std::lround(xf);
            xi = std::clamp(xi, 0L, long(in_w - 1));
            dst[r * out_w + c] = src[std::size_t(yi) * in_w + std::size_t(xi)];
        }
    }
}

Tensor<float> resize_to_256(const Tensor<float>& slice) {
    Tensor<float> out({256, 256});
    resize_plane_bilinear(slice.data(), slice.dim(0), slice.dim(1), out.data(), 256, 256);
    return out;
}

Tensor<std::uint8_t> resize_label_to_256(const Tensor<std::uint8_t>& slice) {
    Tensor<std::uint8_t> out({256, 256});
    resize_plane_nearest(slice.data(), slice.dim(0), slice.dim(1), out.data(), 256, 256);
    return out;
}

PreprocessedVolume preprocess_volume(const volio::CtVolume& volume,
                                     const PrepOptions& opts) {
    auto [box, cropped] = body_crop(volume, opts.body_threshold_hu);
    const std::size_t nz = cropped.voxels.dim(0);
    const std::size_t ch = cropped.voxels.dim(1), cw = cropped.voxels.dim(2);
    const std::size_t S = opts.target_size;

    PreprocessedVolume pv;
    pv.crop_box = box;
    pv.source_shape = volume.shape();
    pv.scale_y = double(S) / double(ch);
    pv.scale_x = double(S) / double(cw);
    pv.planes.resize({nz, S, S});

    std::vector<float> hu(ch * cw);
    std::vector<float> resized(S * S);
    for (std::size_t z = 0; z < nz; ++z) {
        const std::int16_t* src = cropped.voxels.data() + z * ch * cw;
        for (std::size_t i = 0; i < ch * cw; ++i) hu[i] = float(src[i]);
        resize_plane_bilinear(hu.data(), ch, cw, resized.data(), S, S);
        normalize_slice(resized.data(), pv.planes.data() + z * S * S, S * S);
    }
    return pv;
}

Tensor<std::uint8_t> preprocess_labels(const volio::LabelMask& mask,
                                       const CropBox& crop_box,
                                       std::size_t target_size) {
    const std::size_t nz = mask.labels.dim(0);
    const std::size_t ch = crop_box.rows(), cw = crop_box.cols();
    const std::size_t S = target_size;
    Tensor<std::uint8_t> out({nz, S, S});
    std::vector<std::uint8_t> plane(ch * cw);
    for (std::size_t z = 0; z < nz; ++z) {
        for (std::size_t y = 0; y < ch; ++y)
            for (std::size_t x = 0; x < cw; ++x)
                plane[y * cw + x] =
                    mask.labels.at(z, crop_box.row0 + y, crop_box.col0 + x);
        resize_plane_nearest(plane.data(), ch, cw, out.data() + z * S * S, S, S);
    }
    return out;
}

SliceWindow window_at(const PreprocessedVolume& pv, std::size_t target_index,
                      std::size_t context_radius) {
    const std::size_t nz = pv.planes.dim(0);
    const std::size_t S = pv.planes.dim(1);
    if (target_index >= nz) throw DataError("window index out of range");
    const std::size_t len = 2 * context_radius + 1;

    SliceWindow w;
    w.target_index = target_index;
    w.crop_box = pv.crop_box;
    w.scale_y = pv.scale_y;
    w.scale_x = pv.scale_x;
    w.pixels.resize({len, S, S});
    for (std::size_t k = 0; k < len; ++k) {
        long z = long(target_index) + long(k) - long(context_radius);
        z = std::clamp(z, 0L, long(nz - 1));  // edge replication
        std::copy_n(pv.planes.data() + std::size_t(z) * S * S, S * S,
                    w.pixels.data() + k * S * S);
    }
    return w;
}

std::vector<SliceWindow> make_windows(const volio::CtVolume& volume,
                                      const std::vector<std::size_t>& indices,
                                      const PrepOptions& opts) {
    PreprocessedVolume pv = preprocess_volume(volume, opts);
    std::vector<SliceWindow> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices)
        out.push_back(window_at(pv, idx, opts.context_radius));
    return out;
}

std::pair<SliceWindow, Tensor<std::uint8_t>> augment(
    const SliceWindow& window, const Tensor<std::uint8_t>& labels,
    const AugmentParams& params) {
    params.validate();
    const std::size_t len = window.pixels.dim(0);
    const std::size_t h = window.pixels.dim(1), w = window.pixels.dim(2);
    const std::size_t nlab = labels.rank() == 3 ? labels.dim(0) : 1;
    const std::size_t lh = labels.dim(labels.rank() == 3 ? 1 : 0);
    const std::size_t lw = labels.dim(labels.rank() == 3 ? 2 : 1);
    if (lh != h || lw != w) throw DataError("label plane shape mismatch in augment");

    Affine inv = inverse_affine(params, h, w);

    SliceWindow out = window;
    for (std::size_t k = 0; k < len; ++k) {
        const float* src = window.pixels.data() + k * h * w;
        float* dst = out.pixels.data() + k * h * w;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double xs, ys;
                inv.map(double(c), double(r), xs, ys);
                dst[r * w + c] = bilinear_at(src, h, w, xs, ys);
            }
        }
    }
    Tensor<std::uint8_t> labels_out;
    labels_out.resize(labels.dims());
    for (std::size_t k = 0; k < nlab; ++k) {
        const std::uint8_t* src = labels.data() + k * h * w;
        std::uint8_t* dst = labels_out.data() + k * h * w;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double xs, ys;
                inv.map(double(c), double(r), xs, ys);
                dst[r * w + c] = nearest_at(src, h, w, xs, ys);
            }
        }
    }
    return {std::move(out), std::move(labels_out)};
}

}  // namespace lungquant::prep
