#include "lungquant/volio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "lungquant/core/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian; big-endian hosts unsupported");

namespace lungquant::volio {

namespace {

constexpr char kMagic[8] = {'L', 'Q', 'C', 'T', 'I', 'M', 'G', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeHuInt16 = 1;
constexpr std::uint32_t kDtypeLabelU8 = 2;
constexpr std::uint32_t kFlagLungPlane = 1u;
constexpr std::size_t kIdField = 64;

#pragma pack(push, 1)
struct Header {
    char magic[8];
    std::uint32_t version;
    std::uint32_t dtype;
    std::uint32_t flags;
    std::uint32_t slices, rows, cols;
    double dz, dy, dx;
    char patient_id[kIdField];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 120);

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
    Header h{};
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in) throw DataError("truncated header: " + path.string());
    if (std::memcmp(h.magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("bad magic (not a volume/mask container): " + path.string());
    if (h.version != kVersion)
        throw DataError("unsupported container version in " + path.string());
    if (h.slices < 1 || h.rows < 1 || h.cols < 1)
        throw DataError("degenerate shape in " + path.string());
    return h;
}

Header make_header(std::uint32_t dtype, std::uint32_t flags, const Shape3& s,
                   const Spacing& sp, const std::string& id) {
    Header h{};
    std::memcpy(h.magic, kMagic, sizeof(kMagic));
    h.version = kVersion;
    h.dtype = dtype;
    h.flags = flags;
    h.slices = static_cast<std::uint32_t>(s.slices);
    h.rows = static_cast<std::uint32_t>(s.rows);
    h.cols = static_cast<std::uint32_t>(s.cols);
    h.dz = sp.dz;
    h.dy = sp.dy;
    h.dx = sp.dx;
    if (id.size() >= kIdField) throw DataError("patient_id longer than 63 bytes: " + id);
    std::memcpy(h.patient_id, id.data(), id.size());
    return h;
}

std::string id_from_header(const Header& h) {
    std::size_t n = 0;
    while (n < kIdField && h.patient_id[n] != '\0') ++n;
    return std::string(h.patient_id, n);
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

}  // namespace

bool Spacing::valid() const {
    auto ok = [](double v) { return std::isfinite(v) && v > 0.0; };
    return ok(dz) && ok(dy) && ok(dx);
}

Shape3 CtVolume::shape() const {
    return {voxels.dim(0), voxels.dim(1), voxels.dim(2)};
}

void CtVolume::validate() const {
    if (voxels.rank() != 3 || voxels.dim(0) < 1 || voxels.dim(1) < 1 || voxels.dim(2) < 1)
        throw DataError("volume must be a non-empty 3D grid");
    if (!spacing.valid())
        throw DataError("non-positive spacing");
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        int v = voxels[i];
        if (v < kHuMin || v > kHuMax)
            throw DataError("HU out of range: " + std::to_string(v));
    }
}

Shape3 LabelMask::shape() const {
    return {labels.dim(0), labels.dim(1), labels.dim(2)};
}

void LabelMask::validate() const {
    if (labels.rank() != 3 || labels.dim(0) < 1 || labels.dim(1) < 1 || labels.dim(2) < 1)
        throw DataError("mask must be a non-empty 3D grid");
    if (!spacing.valid())
        throw DataError("non-positive spacing");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] > kHighOpacity)
            throw DataError("unknown class code: " + std::to_string(int(labels[i])));
    if (lung) {
        if (lung->dims() != labels.dims())
            throw DataError("lung plane shape mismatch");
        for (std::size_t i = 0; i < lung->size(); ++i)
            if ((*lung)[i] > 1)
                throw DataError("lung plane must be boolean");
    }
}

CtVolume load_volume(const std::filesystem::path& path) {
    auto in = open_in(path);
    Header h = read_header(in, path);
    if (h.dtype != kDtypeHuInt16)
        throw DataError("not a HU volume: " + path.string());
    CtVolume v;
    v.spacing = {h.dz, h.dy, h.dx};
    v.patient_id = id_from_header(h);
    v.voxels.resize({h.slices, h.rows, h.cols});
    in.read(reinterpret_cast<char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(std::int16_t)));
    if (!in) throw DataError("truncated voxel data: " + path.string());
    v.validate();
    return v;
}

void save_volume(const CtVolume& volume, const std::filesystem::path& path) {
    volume.validate();
    auto out = open_out(path);
    Header h = make_header(kDtypeHuInt16, 0, volume.shape(), volume.spacing,
                           volume.patient_id);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    out.write(reinterpret_cast<const char*>(volume.voxels.data()),
              static_cast<std::streamsize>(volume.voxels.size() * sizeof(std::int16_t)));
    if (!out) throw DataError("write failed: " + path.string());
}

LabelMask load_mask(const std::filesystem::path& path) {
    auto in = open_in(path);
    Header h = read_header(in, path);
    if (h.dtype != kDtypeLabelU8)
        throw DataError("not a label mask: " + path.string());
    LabelMask m;
    m.spacing = {h.dz, h.dy, h.dx};
    m.patient_id = id_from_header(h);
    m.labels.resize({h.slices, h.rows, h.cols});
    in.read(reinterpret_cast<char*>(m.labels.data()),
            static_cast<std::streamsize>(m.labels.size()));
    if (!in) throw DataError("truncated label data: " + path.string());
    if (h.flags & kFlagLungPlane) {
        Tensor<std::uint8_t> lung({h.slices, h.rows, h.cols});
        in.read(reinterpret_cast<char*>(lung.data()),
                static_cast<std::streamsize>(lung.size()));
        if (!in) throw DataError("truncated lung plane: " + path.string());
        m.lung = std::move(lung);
    }
    m.validate();
    return m;
}

LabelMask load_mask(const std::filesystem::path& path, const Shape3& expected_shape) {
    LabelMask m = load_mask(path);
    if (!(m.shape() == expected_shape))
        throw DataError("shape mismatch: mask " + path.string() +
                        " does not match its volume");
    return m;
}

void save_mask(const LabelMask& mask, const std::filesystem::path& path) {
    mask.validate();
    auto out = open_out(path);
    std::uint32_t flags = mask.lung ? kFlagLungPlane : 0;
    Header h = make_header(kDtypeLabelU8, flags, mask.shape(), mask.spacing,
                           mask.patient_id);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    out.write(reinterpret_cast<const char*>(mask.labels.data()),
              static_cast<std::streamsize>(mask.labels.size()));
    if (mask.lung)
        out.write(reinterpret_cast<const char*>(mask.lung->data()),
                  static_cast<std::streamsize>(mask.lung->size()));
    if (!out) throw DataError("write failed: " + path.string());
}

double voxel_volume_ml(const Spacing& spacing) {
    if (!spacing.valid()) throw DataError("non-positive spacing");
    return spacing.dz * spacing.dy * spacing.dx / 1000.0;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest " + manifest_path.string());
    Dataset ds;
    ds.manifest_path = manifest_path;
    auto base = manifest_path.parent_path();
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string id, vol, mask;
        if (!std::getline(ss, id, '\t') || !std::getline(ss, vol, '\t') ||
            !std::getline(ss, mask, '\t'))
            throw DataError("malformed manifest line " + std::to_string(lineno));
        if (!seen.insert(id).second)
            throw DataError("duplicate patient_id in manifest: " + id);
        DatasetRecord rec;
        rec.patient_id = id;
        rec.volume_path = std::filesystem::path(vol).is_absolute()
                              ? std::filesystem::path(vol)
                              : base / vol;
        rec.mask_path = std::filesystem::path(mask).is_absolute()
                            ? std::filesystem::path(mask)
                            : base / mask;
        if (!std::filesystem::exists(rec.volume_path))
            throw DataError("missing volume file " + rec.volume_path.string());
        if (!std::filesystem::exists(rec.mask_path))
            throw DataError("missing mask file " + rec.mask_path.string());
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

void save_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path) {
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + manifest_path.string());
    auto base = manifest_path.parent_path();
    for (const auto& rec : dataset.records) {
        auto rel = [&](const std::filesystem::path& p) {
            auto r = std::filesystem::relative(p, base);
            return r.empty() ? p.string() : r.string();
        };
        out << rec.patient_id << '\t' << rel(rec.volume_path) << '\t'
            << rel(rec.mask_path) << '\n';
    }
    if (!out) throw DataError("write failed: " + manifest_path.string());
}

}  // namespace lungquant::volio
