#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lungquant/volio.hpp"

namespace lungquant::synth {

// Axis-aligned ellipsoid in voxel coordinates (slice, row, col).
struct Ellipsoid {
    double cz = 0, cy = 0, cx = 0;
    double rz = 1, ry = 1, rx = 1;

    bool contains(double z, double y, double x) const {
        double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
        return a * a + b * b + c * c <= 1.0;
    }
};

struct LesionSpec {
    volio::ClassCode cls = volio::kGgo;
    Ellipsoid shape;
    double hu_lo = -650, hu_hi = -450;  // noiseless level drawn in [lo,hi]
};

// Deterministic lung phantom: body ellipsoid on air, two lung ellipsoids,
// ellipsoidal lesions inside the lungs. Lesion geometry is analytic so class
// volumes are exactly checkable.
struct PhantomSpec {
    volio::Shape3 grid{16, 64, 64};
    volio::Spacing spacing{1.0, 1.0, 1.0};
    Ellipsoid body;
    Ellipsoid lung_left, lung_right;
    std::vector<LesionSpec> lesions;
    double air_hu = -1000;
    double body_hu = 40;
    double lung_hu = -850;
    double noise_sd = 20;
    std::uint64_t seed = 0;
    std::string patient_id = "phantom";

    // Canonical proportions for a given grid: body filling most of the frame,
    // two lungs, no lesions.
    static PhantomSpec canonical(const volio::Shape3& grid, std::uint64_t seed);
};

struct PhantomResult {
    volio::CtVolume volume;
    volio::LabelMask mask;  // lung plane set
    // Voxel tallies counted during synthesis, independent of the mask consumer.
    std::size_t ggo_voxels = 0, high_voxels = 0, lung_voxels = 0;
    double ggo_ml = 0, high_ml = 0, lung_ml = 0;
};

PhantomResult generate_phantom(const PhantomSpec& spec);

// Convenience: canonical phantom with `n_ggo` GGO and `n_high` high-opacity
// lesions placed deterministically from the seed. `lesion_scale` in (0,1]
// scales lesion size relative to the lungs.
PhantomSpec with_lesions(PhantomSpec spec, int n_ggo, int n_high,
                         double lesion_scale, std::uint64_t seed);

struct CohortOptions {
    double geometry_jitter = 0.05;  // relative jitter of body/lung axes
    double lesion_scale_min = 0.30; // smallest phantom's primary GGO scale
    double lesion_scale_max = 0.72; // largest phantom's primary GGO scale
    double high_opacity_prob = 0.65;
    double extra_ggo_prob = 0.35;
};

struct CohortTruthRow {
    std::string patient_id;
    double ggo_ml = 0, high_ml = 0, lung_ml = 0;
};

struct CohortResult {
    volio::Dataset dataset;
    std::vector<CohortTruthRow> truth;
};

// Writes n phantoms + manifest.tsv + analytic_volumes.csv under out_dir.
// Identical (n, base, seed, options) produce byte-identical outputs.
CohortResult generate_cohort(std::size_t n, const PhantomSpec& base,
                             std::uint64_t seed,
                             const std::filesystem::path& out_dir,
                             const CohortOptions& options = {});

std::vector<CohortTruthRow> load_cohort_truth(const std::filesystem::path& csv_path);

}  // namespace lungquant::synth
