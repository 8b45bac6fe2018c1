#include "pban/dataset.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pban/config_json.hpp"
#include "pban/errors.hpp"
#include "pban/image.hpp"

namespace pban {

namespace {

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        fields.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return fields;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

// Little-endian byte writer/reader for the checkpoint format.
class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { le(v, 2); }
    void u32(std::uint32_t v) { le(v, 4); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
    void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    void le(std::uint32_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
    std::uint8_t u8() { return std::uint8_t(le(1)); }
    std::uint16_t u16() { return std::uint16_t(le(2)); }
    std::uint32_t u32() { return le(4); }
    float f32() { return std::bit_cast<float>(le(4)); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw DecodeError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint32_t le(int n) {
        need(std::size_t(n));
        std::uint32_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint32_t(in_[pos_ + std::size_t(i)]) << (8 * i);
        pos_ += std::size_t(n);
        return v;
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    const std::filesystem::path base = path.parent_path();
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": line 1: missing header, expected sr_path,hr_path,mos");
    if (strip_cr(line) != "sr_path,hr_path,mos") {
        throw FormatError(path.string() + ": line 1: expected sr_path,hr_path,mos, got '" + strip_cr(line) + "'");
    }
    Manifest m;
    Index line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (trim(line).empty()) continue;
        const Index row = Index(m.records.size()) + 1;
        const std::string where =
            path.string() + ": row " + std::to_string(row) + " (line " + std::to_string(line_no) + ")";
        const auto fields = split_commas(line);
        if (fields.size() != 3) {
            throw FormatError(where + ": expected 3 fields, got " + std::to_string(fields.size()));
        }
        ManifestRecord r;
        const std::string sr = trim(fields[0]), hr = trim(fields[1]), mos = trim(fields[2]);
        if (sr.empty() || hr.empty()) throw FormatError(where + ": empty path");
        const char* end = mos.data() + mos.size();
        const auto [ptr, ec] = std::from_chars(mos.data(), end, r.mos);
        if (mos.empty() || ec != std::errc() || ptr != end || !std::isfinite(r.mos)) {
            throw ParseError(where + ": mos '" + mos + "' is not a finite number");
        }
        r.sr_path = std::filesystem::path(sr).is_absolute() ? std::filesystem::path(sr) : base / sr;
        r.hr_path = std::filesystem::path(hr).is_absolute() ? std::filesystem::path(hr) : base / hr;
        m.records.push_back(std::move(r));
    }
    return m;
}

std::vector<std::uint8_t> serialize_checkpoint(const NamedWeights<float>& weights, const PbanConfig& config) {
    Writer w;
    w.bytes("PBN1");
    w.u32(kCheckpointVersion);
    const std::string cfg = nlohmann::json(config).dump();
    w.u32(std::uint32_t(cfg.size()));
    w.bytes(cfg);
    w.u32(std::uint32_t(weights.size()));
    for (const auto& [name, t] : weights) {  // std::map: already sorted
        if (name.empty() || name.size() > 0xffff) throw ParameterError("bad tensor name length for '" + name + "'");
        if (t.rank() > 0xff) throw ParameterError("tensor '" + name + "' has too many dimensions");
        w.u16(std::uint16_t(name.size()));
        w.bytes(name);
        w.u8(std::uint8_t(t.rank()));
        for (Index d : t.shape()) {
            if (d < 0 || d > Index(0xffffffff)) throw ParameterError("tensor '" + name + "' extent out of range");
            w.u32(std::uint32_t(d));
        }
        for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "PBN1") throw FormatError("not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    const std::uint32_t cfg_len = r.u32();
    const std::string cfg = r.bytes(cfg_len);
    try {
        ck.config = nlohmann::json::parse(cfg).get<PbanConfig>();
        ck.config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(std::string("checkpoint config: ") + e.what());
    } catch (const ParameterError& e) {
        throw DecodeError(std::string("checkpoint config: ") + e.what());
    }
    const std::uint32_t count = r.u32();
    std::string previous;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.bytes(r.u16());
        if (k > 0 && name <= previous) throw DecodeError("checkpoint tensor names not sorted at '" + name + "'");
        Shape shape(r.u8());
        for (auto& d : shape) d = r.u32();
        Index n = 1;
        const Index limit = Index(r.remaining() / 4);
        for (Index d : shape) {
            if (d != 0 && n > limit / d) throw DecodeError("checkpoint truncated in tensor '" + name + "'");
            n *= d;
        }
        TensorF t(shape);
        for (Index i = 0; i < n; ++i) {
            t[i] = r.f32();
            if (!std::isfinite(t[i])) throw DecodeError("non-finite value in tensor '" + name + "'");
        }
        ck.weights.emplace(name, std::move(t));
        previous = name;
    }
    if (r.remaining() != 0) throw DecodeError(std::to_string(r.remaining()) + " trailing bytes after checkpoint");
    const auto expected = weight_shapes(ck.config);
    for (const auto& [name, shape] : expected) {
        auto it = ck.weights.find(name);
        if (it == ck.weights.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
        if (it->second.shape() != shape) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                              ", config needs " + shape_str(shape));
        }
    }
    if (ck.weights.size() != expected.size()) throw FormatError("checkpoint has tensors the config does not use");
    return ck;
}

void save_checkpoint(const NamedWeights<float>& weights, const PbanConfig& config,
                     const std::filesystem::path& path) {
    write_file(path, serialize_checkpoint(weights, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return deserialize_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": " + e.what());
    }
}

}  // namespace pban
