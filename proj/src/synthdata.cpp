#include "lungquant/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"

namespace lungquant::synth {

namespace {

// Sufficient containment test in the lung ellipsoid's metric: center distance
// plus the largest semi-axis ratio must stay below 1.
bool ellipsoid_inside(const Ellipsoid& inner, const Ellipsoid& outer) {
    double dz = (inner.cz - outer.cz) / outer.rz;
    double dy = (inner.cy - outer.cy) / outer.ry;
    double dx = (inner.cx - outer.cx) / outer.rx;
    double center_dist = std::sqrt(dz * dz + dy * dy + dx * dx);
    double ratio = std::max({inner.rz / outer.rz, inner.ry / outer.ry,
                             inner.rx / outer.rx});
    return center_dist + ratio <= 1.0;
}

int16_t to_hu(double v) {
    double c = std::clamp(v, double(volio::kHuMin), double(volio::kHuMax));
    return static_cast<int16_t>(std::lround(c));
}

}  // namespace

PhantomSpec PhantomSpec::canonical(const volio::Shape3& grid, std::uint64_t seed) {
    PhantomSpec s;
    s.grid = grid;
    s.seed = seed;
    double nz = double(grid.slices), ny = double(grid.rows), nx = double(grid.cols);
    double cz = 0.5 * (nz - 1), cy = 0.5 * (ny - 1), cx = 0.5 * (nx - 1);
    s.body = {cz, cy, cx, 0.62 * nz, 0.42 * ny, 0.46 * nx};
    s.lung_left = {cz, cy, cx - 0.21 * nx, 0.50 * nz, 0.27 * ny, 0.15 * nx};
    s.lung_right = {cz, cy, cx + 0.21 * nx, 0.50 * nz, 0.27 * ny, 0.15 * nx};
    return s;
}

PhantomResult generate_phantom(const PhantomSpec& spec) {
    if (spec.grid.slices < 1 || spec.grid.rows < 1 || spec.grid.cols < 1)
        throw DataError("phantom grid must be non-empty");
    if (!spec.spacing.valid()) throw DataError("non-positive spacing");

    for (const auto& les : spec.lesions) {
        if (!ellipsoid_inside(les.shape, spec.lung_left) &&
            !ellipsoid_inside(les.shape, spec.lung_right))
            throw DataError("lesion not containable in lung");
    }

    Rng rng(spec.seed);
    std::vector<double> lesion_level(spec.lesions.size());
    for (std::size_t i = 0; i < spec.lesions.size(); ++i)
        lesion_level[i] = rng.uniform(spec.lesions[i].hu_lo, spec.lesions[i].hu_hi);

    PhantomResult out;
    out.volume.spacing = spec.spacing;
    out.volume.patient_id = spec.patient_id;
    out.volume.voxels.resize({spec.grid.slices, spec.grid.rows, spec.grid.cols});
    out.mask.spacing = spec.spacing;
    out.mask.patient_id = spec.patient_id;
    out.mask.labels.resize({spec.grid.slices, spec.grid.rows, spec.grid.cols});
    Tensor<std::uint8_t> lung({spec.grid.slices, spec.grid.rows, spec.grid.cols});

    std::size_t idx = 0;
    for (std::size_t z = 0; z < spec.grid.slices; ++z) {
        for (std::size_t y = 0; y < spec.grid.rows; ++y) {
            for (std::size_t x = 0; x < spec.grid.cols; ++x, ++idx) {
                double zz = double(z), yy = double(y), xx = double(x);
                bool in_lung = spec.lung_left.contains(zz, yy, xx) ||
                               spec.lung_right.contains(zz, yy, xx);
                double hu = spec.air_hu;
                std::uint8_t label = volio::kBackground;
                if (in_lung) {
                    hu = spec.lung_hu;
                    for (std::size_t li = 0; li < spec.lesions.size(); ++li) {
                        if (spec.lesions[li].shape.contains(zz, yy, xx)) {
                            hu = lesion_level[li];
                            label = spec.lesions[li].cls;
                            break;
                        }
                    }
                } else if (spec.body.contains(zz, yy, xx)) {
                    hu = spec.body_hu;
                }
                if (in_lung) ++out.lung_voxels;
                if (label == volio::kGgo) ++out.ggo_voxels;
                if (label == volio::kHighOpacity) ++out.high_voxels;
                if (spec.noise_sd > 0) hu += rng.normal(0.0, spec.noise_sd);
                out.volume.voxels[idx] = to_hu(hu);
                out.mask.labels[idx] = label;
                lung[idx] = in_lung ? 1 : 0;
            }
        }
    }
    out.mask.lung = std::move(lung);

    double vv = volio::voxel_volume_ml(spec.spacing);
    out.ggo_ml = double(out.ggo_voxels) * vv;
    out.high_ml = double(out.high_voxels) * vv;
    out.lung_ml = double(out.lung_voxels) * vv;
    return out;
}

PhantomSpec with_lesions(PhantomSpec spec, int n_ggo, int n_high,
                         double lesion_scale, std::uint64_t seed) {
    Rng rng(seed);
    auto place = [&](volio::ClassCode cls, double scale) {
        const Ellipsoid& lung = rng.uniform() < 0.5 ? spec.lung_left : spec.lung_right;
        Ellipsoid les;
        les.rz = scale * lung.rz * rng.uniform(0.85, 1.0);
        les.ry = scale * lung.ry * rng.uniform(0.85, 1.0);
        les.rx = scale * lung.rx * rng.uniform(0.85, 1.0);
        double ratio = std::max({les.rz / lung.rz, les.ry / lung.ry, les.rx / lung.rx});
        double max_off = std::max(0.0, (1.0 - ratio) * 0.9);
        // offset inside the lung metric ball of radius max_off
        double oz = rng.uniform(-1, 1), oy = rng.uniform(-1, 1), ox = rng.uniform(-1, 1);
        double norm = std::sqrt(oz * oz + oy * oy + ox * ox);
        double r = max_off * rng.uniform(0.0, 0.95);
        if (norm > 0) {
            oz *= r / norm;
            oy *= r / norm;
            ox *= r / norm;
        }
        les.cz = lung.cz + oz * lung.rz;
        les.cy = lung.cy + oy * lung.ry;
        les.cx = lung.cx + ox * lung.rx;
        LesionSpec ls;
        ls.cls = cls;
        ls.shape = les;
        if (cls == volio::kGgo) {
            ls.hu_lo = -650;
            ls.hu_hi = -450;
        } else {
            ls.hu_lo = -20;
            ls.hu_hi = 80;
        }
        spec.lesions.push_back(ls);
    };
    for (int i = 0; i < n_ggo; ++i) place(volio::kGgo, lesion_scale * (i == 0 ? 1.0 : 0.6));
    for (int i = 0; i < n_high; ++i) place(volio::kHighOpacity, lesion_scale * 0.8);
    return spec;
}

CohortResult generate_cohort(std::size_t n, const PhantomSpec& base,
                             std::uint64_t seed,
                             const std::filesystem::path& out_dir,
                             const CohortOptions& options) {
    if (n < 1) throw DataError("cohort size must be >= 1");
    std::filesystem::create_directories(out_dir);

    Rng rng(seed);
    CohortResult res;
    res.dataset.manifest_path = out_dir / "manifest.tsv";

    // Primary GGO size stratified across the cohort so lesion volumes span the
    // full [scale_min, scale_max] range regardless of seed.
    std::vector<double> scales(n);
    for (std::size_t i = 0; i < n; ++i) {
        double t = n == 1 ? 1.0 : double(i) / double(n - 1);
        scales[i] = options.lesion_scale_min *
                    std::pow(options.lesion_scale_max / options.lesion_scale_min, t);
    }
    rng.shuffle(scales);

    int width = n > 999 ? 4 : 3;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t pseed = rng.derive(i + 1);
        Rng prng(pseed);

        PhantomSpec spec = base;
        std::ostringstream id;
        id << "phantom" << std::setw(width) << std::setfill('0') << i;
        spec.patient_id = id.str();
        spec.seed = prng.next_u64();

        double j = options.geometry_jitter;
        auto jit = [&](double v) { return v * prng.uniform(1.0 - j, 1.0 + j); };
        spec.body.ry = jit(spec.body.ry);
        spec.body.rx = jit(spec.body.rx);
        spec.lung_left.ry = jit(spec.lung_left.ry);
        spec.lung_left.rx = jit(spec.lung_left.rx);
        spec.lung_right.ry = jit(spec.lung_right.ry);
        spec.lung_right.rx = jit(spec.lung_right.rx);

        int n_ggo = 1 + (prng.uniform() < options.extra_ggo_prob ? 1 : 0);
        int n_high = prng.uniform() < options.high_opacity_prob ? 1 : 0;
        spec = with_lesions(std::move(spec), n_ggo, n_high, scales[i], prng.next_u64());

        PhantomResult ph = generate_phantom(spec);
        auto vol_path = out_dir / (spec.patient_id + ".vol");
        auto mask_path = out_dir / (spec.patient_id + ".mask");
        volio::save_volume(ph.volume, vol_path);
        volio::save_mask(ph.mask, mask_path);
        res.dataset.records.push_back({spec.patient_id, vol_path, mask_path});
        res.truth.push_back({spec.patient_id, ph.ggo_ml, ph.high_ml, ph.lung_ml});
    }

    volio::save_manifest(res.dataset, res.dataset.manifest_path);

    std::ofstream csv(out_dir / "analytic_volumes.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot write analytic_volumes.csv");
    csv << "patient_id,ggo_ml,high_ml,lung_ml\n";
    csv.precision(17);
    for (const auto& row : res.truth)
        csv << row.patient_id << ',' << row.ggo_ml << ',' << row.high_ml << ','
            << row.lung_ml << '\n';
    return res;
}

std::vector<CohortTruthRow> load_cohort_truth(const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open " + csv_path.string());
    std::vector<CohortTruthRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        CohortTruthRow r;
        std::string f;
        std::getline(ss, r.patient_id, ',');
        std::getline(ss, f, ',');
        r.ggo_ml = std::stod(f);
        std::getline(ss, f, ',');
        r.high_ml = std::stod(f);
        std::getline(ss, f, ',');
        r.lung_ml = std::stod(f);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace lungquant::synth
