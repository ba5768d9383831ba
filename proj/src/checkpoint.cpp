#include "masters/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "masters/masking.hpp"

namespace masters {

namespace {

constexpr char kModelMagic[8] = {'M', 'T', 'R', 'S', 'M', 'O', 'D', 'L'};
constexpr char kMaskMagic[8] = {'M', 'T', 'R', 'S', 'M', 'A', 'S', 'K'};
constexpr char kViewMagic[8] = {'M', 'T', 'R', 'S', 'P', 'V', 'E', 'W'};
constexpr uint32_t kVersion = 1;

void write_u64(std::ostream& out, uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(buf, 8);
}

void write_u32(std::ostream& out, uint32_t v) {
    char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(buf, 4);
}

void write_i64(std::ostream& out, int64_t v) { write_u64(out, static_cast<uint64_t>(v)); }

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<uint64_t>(v)); }

void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

uint32_t read_u32(std::istream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    return v;
}

int64_t read_i64(std::istream& in) { return static_cast<int64_t>(read_u64(in)); }

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

std::string read_string(std::istream& in) {
    const uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    return in;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingArtifactError("cannot write " + path.string());
    return out;
}

void check_magic(std::istream& in, const char (&magic)[8], const std::filesystem::path& path) {
    char buf[8];
    in.read(buf, 8);
    if (!in || std::memcmp(buf, magic, 8) != 0)
        throw StructuralError("bad container magic in " + path.string());
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out.write(kModelMagic, 8);
    write_u32(out, kVersion);
    const auto& cfg = model.config();
    write_i64(out, cfg.vocab_size);
    write_i64(out, cfg.context_len);
    write_i64(out, cfg.n_layers);
    write_i64(out, cfg.d_model);
    write_i64(out, cfg.n_heads);
    write_u64(out, cfg.seed);
    write_u32(out, static_cast<uint32_t>(model.params().entries.size()));
    for (const auto& entry : model.params().entries) {
        write_string(out, entry.name);
        write_u32(out, static_cast<uint32_t>(entry.shape.size()));
        for (int64_t dim : entry.shape) write_i64(out, dim);
        write_i64(out, entry.count());
        for (double v : entry.values) write_f64(out, v);
    }
    if (!out) throw StructuralError("short write on " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    check_magic(in, kModelMagic, path);
    if (read_u32(in) != kVersion) throw StructuralError("unsupported container version in " + path.string());
    ModelConfig cfg;
    cfg.vocab_size = read_i64(in);
    cfg.context_len = read_i64(in);
    cfg.n_layers = read_i64(in);
    cfg.d_model = read_i64(in);
    cfg.n_heads = read_i64(in);
    cfg.seed = read_u64(in);

    ParameterView view;
    const uint32_t entries = read_u32(in);
    view.entries.reserve(entries);
    for (uint32_t e = 0; e < entries; ++e) {
        ParamEntry entry;
        entry.name = read_string(in);
        const uint32_t rank = read_u32(in);
        entry.shape.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) entry.shape[i] = read_i64(in);
        const int64_t count = read_i64(in);
        entry.values.resize(static_cast<size_t>(count));
        for (double& v : entry.values) v = read_f64(in);
        view.entries.push_back(std::move(entry));
    }
    if (!in) throw StructuralError("short read on " + path.string());
    return Model(cfg, std::move(view));
}

void save_mask_plan(const MaskPlan& plan, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out.write(kMaskMagic, 8);
    write_u32(out, kVersion);
    write_f64(out, plan.ratio);
    write_u32(out, static_cast<uint32_t>(plan.per_layer.size()));
    for (const auto& lm : plan.per_layer) {
        write_string(out, lm.layer_name);
        write_f64(out, lm.threshold);
        write_i64(out, lm.element_count);
        write_i64(out, lm.kept_count);
        out.write(reinterpret_cast<const char*>(lm.bits.data()),
                  static_cast<std::streamsize>(lm.bits.size()));
    }
    if (!out) throw StructuralError("short write on " + path.string());
}

void save_parameter_view(const ParameterView& view, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out.write(kViewMagic, 8);
    write_u32(out, kVersion);
    write_u32(out, static_cast<uint32_t>(view.entries.size()));
    for (const auto& entry : view.entries) {
        write_string(out, entry.name);
        write_u32(out, static_cast<uint32_t>(entry.shape.size()));
        for (int64_t dim : entry.shape) write_i64(out, dim);
        write_i64(out, entry.count());
        for (double v : entry.values) write_f64(out, v);
    }
    if (!out) throw StructuralError("short write on " + path.string());
}

ParameterView load_parameter_view(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    check_magic(in, kViewMagic, path);
    if (read_u32(in) != kVersion) throw StructuralError("unsupported container version in " + path.string());
    ParameterView view;
    const uint32_t entries = read_u32(in);
    view.entries.reserve(entries);
    for (uint32_t e = 0; e < entries; ++e) {
        ParamEntry entry;
        entry.name = read_string(in);
        const uint32_t rank = read_u32(in);
        entry.shape.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) entry.shape[i] = read_i64(in);
        const int64_t count = read_i64(in);
        entry.values.resize(static_cast<size_t>(count));
        for (double& v : entry.values) v = read_f64(in);
        view.entries.push_back(std::move(entry));
    }
    if (!in) throw StructuralError("short read on " + path.string());
    return view;
}

MaskPlan load_mask_plan(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    check_magic(in, kMaskMagic, path);
    if (read_u32(in) != kVersion) throw StructuralError("unsupported container version in " + path.string());
    MaskPlan plan;
    plan.ratio = read_f64(in);
    const uint32_t layers = read_u32(in);
    plan.per_layer.reserve(layers);
    for (uint32_t l = 0; l < layers; ++l) {
        LayerMask lm;
        lm.layer_name = read_string(in);
        lm.threshold = read_f64(in);
        lm.element_count = read_i64(in);
        lm.kept_count = read_i64(in);
        lm.bits.resize(static_cast<size_t>((lm.element_count + 7) / 8));
        in.read(reinterpret_cast<char*>(lm.bits.data()),
                static_cast<std::streamsize>(lm.bits.size()));
        plan.per_layer.push_back(std::move(lm));
    }
    if (!in) throw StructuralError("short read on " + path.string());
    return plan;
}

}  // namespace masters
