#pragma once

// Reader/writer for the tensor archive layout:
//
//   [u64 little-endian N][N bytes UTF-8 JSON header][data section]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end]},
// offsets relative to the data-section start, plus an optional "__metadata__"
// string->string map. Checkpoints and every sidecar (Fisher diagonals, Gram
// matrices, sign vectors, task vectors) share this layout.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tensor_ties/dtype.hpp"
#include "tensor_ties/error.hpp"

namespace tensor_ties {

using Shape = std::vector<std::int64_t>;

inline std::size_t numel(const Shape& shape) noexcept
{
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

inline std::string shape_str(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t begin = 0; ///< half-open byte range into the data section
    std::uint64_t end = 0;
};

/// A dense tensor as stored on disk: dtype, shape and raw little-endian bytes.
struct Tensor {
    DType dtype = DType::F32;
    Shape shape;
    std::vector<std::byte> data;

    std::size_t numel() const noexcept { return tensor_ties::numel(shape); }

    /// Upcasts a float tensor to float32 values.
    std::vector<float> to_float32() const
    {
        if (!is_float(dtype)) {
            throw ValidationError("tensor of dtype " + std::string(dtype_name(dtype)) +
                                  " is not a float tensor");
        }
        const std::size_t n = numel();
        const std::size_t es = dtype_size(dtype);
        std::vector<float> out(n);
        if (dtype == DType::F32) {
            if (n) std::memcpy(out.data(), data.data(), n * sizeof(float));
            return out;
        }
        for (std::size_t i = 0; i < n; ++i) out[i] = decode_float(dtype, data.data() + i * es);
        return out;
    }

    /// Encodes float32 values into `dt`; narrowing overflow throws naming `name`.
    static Tensor from_float32(DType dt, Shape shape, std::span<const float> values,
                               std::string_view name)
    {
        Tensor t;
        t.dtype = dt;
        t.shape = std::move(shape);
        const std::size_t es = dtype_size(dt);
        t.data.resize(values.size() * es);
        if (dt == DType::F32) {
            if (!values.empty()) std::memcpy(t.data.data(), values.data(), t.data.size());
            return t;
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!encode_float(dt, values[i], t.data.data() + i * es)) {
                throw ComputeError("value " + std::to_string(values[i]) + " of tensor '" +
                                   std::string(name) + "' overflows " +
                                   std::string(dtype_name(dt)));
            }
        }
        return t;
    }
};

inline bool operator==(const Tensor& a, const Tensor& b)
{
    return a.dtype == b.dtype && a.shape == b.shape && a.data == b.data;
}

/// Named tensors in lexicographic name order; this order is the canonical
/// flat order used by every deterministic reduction in the library.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& at(const std::string& name) const
    {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValidationError("missing tensor '" + name + "'");
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

inline bool operator==(const Checkpoint& a, const Checkpoint& b)
{
    return a.tensors == b.tensors && a.metadata == b.metadata;
}

enum class DtypePolicy { Preserve, F32, F16, BF16 };

inline DtypePolicy parse_dtype_policy(std::string_view s)
{
    if (s == "preserve") return DtypePolicy::Preserve;
    if (s == "f32") return DtypePolicy::F32;
    if (s == "f16") return DtypePolicy::F16;
    if (s == "bf16") return DtypePolicy::BF16;
    throw ValidationError("unknown dtype policy '" + std::string(s) + "'");
}

inline std::string_view dtype_policy_name(DtypePolicy p) noexcept
{
    switch (p) {
    case DtypePolicy::Preserve: return "preserve";
    case DtypePolicy::F32: return "f32";
    case DtypePolicy::F16: return "f16";
    case DtypePolicy::BF16: return "bf16";
    }
    return "?";
}

struct ArchiveHeader {
    std::vector<TensorMeta> tensors; ///< in header (lexicographic) order
    std::map<std::string, std::string> metadata;
    std::uint64_t data_offset = 0; ///< absolute file offset of the data section
};

namespace detail {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const std::string& name)
{
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
        throw FormatError("tensor '" + name + "': size overflows");
    }
    return a * b;
}

inline TensorMeta parse_entry(const std::string& name, const nlohmann::json& j)
{
    if (!j.is_object()) throw FormatError("malformed header: entry '" + name + "' is not an object");
    TensorMeta m;
    m.name = name;

    auto dt = j.find("dtype");
    if (dt == j.end() || !dt->is_string()) {
        throw FormatError("malformed header: tensor '" + name + "' has no dtype");
    }
    auto parsed = parse_dtype(dt->get<std::string>());
    if (!parsed) {
        throw FormatError("unknown dtype '" + dt->get<std::string>() + "' for tensor '" + name + "'");
    }
    m.dtype = *parsed;

    auto sh = j.find("shape");
    if (sh == j.end() || !sh->is_array()) {
        throw FormatError("malformed header: tensor '" + name + "' has no shape");
    }
    std::uint64_t count = 1;
    for (const auto& d : *sh) {
        if (!d.is_number_unsigned()) {
            throw FormatError("malformed header: tensor '" + name + "' has a negative or non-integer dimension");
        }
        const auto v = d.get<std::uint64_t>();
        if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
            throw FormatError("tensor '" + name + "': dimension too large");
        }
        count = checked_mul(count, v, name);
        m.shape.push_back(static_cast<std::int64_t>(v));
    }

    auto off = j.find("data_offsets");
    if (off == j.end() || !off->is_array() || off->size() != 2 || !(*off)[0].is_number_unsigned() ||
        !(*off)[1].is_number_unsigned()) {
        throw FormatError("malformed header: tensor '" + name + "' has invalid data_offsets");
    }
    m.begin = (*off)[0].get<std::uint64_t>();
    m.end = (*off)[1].get<std::uint64_t>();
    if (m.end < m.begin) throw FormatError("tensor '" + name + "': data_offsets end before begin");
    if (m.end - m.begin != checked_mul(count, dtype_size(m.dtype), name)) {
        throw FormatError("tensor '" + name + "': byte range length does not match shape " +
                          shape_str(m.shape) + " x " + std::string(dtype_name(m.dtype)));
    }
    return m;
}

} // namespace detail

/// Parses and validates the header of an in-memory archive.
inline ArchiveHeader parse_header(std::span<const std::byte> file)
{
    if (file.size() < 8) throw FormatError("malformed header: file shorter than 8 bytes");
    const auto n = detail::load_le<std::uint64_t>(file.data());
    if (n > file.size() - 8) throw FormatError("malformed header: header length exceeds file size");

    const std::string_view text(reinterpret_cast<const char*>(file.data() + 8), n);
    std::set<std::string> seen;
    bool duplicate = false;
    std::string duplicate_name;
    nlohmann::json::parser_callback_t on_event = [&](int depth, nlohmann::json::parse_event_t ev,
                                                    nlohmann::json& parsed) {
        if (depth == 1 && ev == nlohmann::json::parse_event_t::key) {
            auto key = parsed.get<std::string>();
            if (!seen.insert(key).second) {
                duplicate = true;
                duplicate_name = key;
            }
        }
        return true;
    };
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text, on_event);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }
    if (!j.is_object()) throw FormatError("malformed header: top level is not an object");
    if (duplicate) throw FormatError("malformed header: duplicate key '" + duplicate_name + "'");

    ArchiveHeader h;
    h.data_offset = 8 + n;
    const std::uint64_t data_size = file.size() - h.data_offset;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (!it->is_object()) throw FormatError("malformed header: __metadata__ is not an object");
            for (auto m = it->begin(); m != it->end(); ++m) {
                if (!m->is_string()) {
                    throw FormatError("malformed header: metadata value for '" + m.key() +
                                      "' is not a string");
                }
                h.metadata[m.key()] = m->get<std::string>();
            }
            continue;
        }
        auto meta = detail::parse_entry(it.key(), *it);
        if (meta.end > data_size) {
            throw FormatError("truncated data section: tensor '" + meta.name + "' ends at byte " +
                              std::to_string(meta.end) + " of " + std::to_string(data_size));
        }
        h.tensors.push_back(std::move(meta));
    }

    std::vector<const TensorMeta*> by_offset;
    for (const auto& m : h.tensors) {
        if (m.end > m.begin) by_offset.push_back(&m);
    }
    std::sort(by_offset.begin(), by_offset.end(),
              [](auto* a, auto* b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            throw FormatError("overlapping ranges: tensors '" + by_offset[i - 1]->name + "' and '" +
                              by_offset[i]->name + "'");
        }
    }
    return h;
}

inline Checkpoint decode_archive(std::span<const std::byte> file)
{
    const auto header = parse_header(file);
    Checkpoint ck;
    ck.metadata = header.metadata;
    for (const auto& m : header.tensors) {
        Tensor t;
        t.dtype = m.dtype;
        t.shape = m.shape;
        const auto* first = file.data() + header.data_offset + m.begin;
        t.data.assign(first, first + (m.end - m.begin));
        ck.tensors.emplace(m.name, std::move(t));
    }
    return ck;
}

inline std::vector<std::byte> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> bytes(size);
    if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw ValidationError("cannot read '" + path.string() + "'");
    }
    return bytes;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    const auto bytes = read_file(path);
    try {
        return decode_archive(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Applies a dtype policy to every float tensor; non-float tensors pass through.
inline Checkpoint convert_dtypes(const Checkpoint& ck, DtypePolicy policy)
{
    if (policy == DtypePolicy::Preserve) return ck;
    const DType target = policy == DtypePolicy::F32   ? DType::F32
                         : policy == DtypePolicy::F16 ? DType::F16
                                                      : DType::BF16;
    Checkpoint out;
    out.metadata = ck.metadata;
    for (const auto& [name, t] : ck.tensors) {
        if (!is_float(t.dtype) || t.dtype == target) {
            out.tensors.emplace(name, t);
            continue;
        }
        const auto values = t.to_float32();
        for (float v : values) {
            if (!std::isfinite(v)) {
                throw ComputeError("tensor '" + name + "' has non-finite values; cannot narrow to " +
                                   std::string(dtype_name(target)));
            }
        }
        out.tensors.emplace(name, Tensor::from_float32(target, t.shape, values, name));
    }
    return out;
}

/// Serialises a checkpoint. The header is canonical: sorted keys, tensors laid
/// out contiguously in name order, padded with spaces to a multiple of 8 bytes.
inline std::vector<std::byte> encode_archive(const Checkpoint& ck)
{
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        if (name == "__metadata__") throw ValidationError("reserved tensor name '__metadata__'");
        if (t.data.size() != t.numel() * dtype_size(t.dtype)) {
            throw ValidationError("tensor '" + name + "': buffer size does not match shape");
        }
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + t.data.size()}}};
        offset += t.data.size();
    }
    if (!ck.metadata.empty()) header["__metadata__"] = ck.metadata;

    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::byte> out(8 + text.size() + offset);
    detail::store_le<std::uint64_t>(out.data(), text.size());
    std::memcpy(out.data() + 8, text.data(), text.size());
    auto* cursor = out.data() + 8 + text.size();
    for (const auto& [name, t] : ck.tensors) {
        if (!t.data.empty()) std::memcpy(cursor, t.data.data(), t.data.size());
        cursor += t.data.size();
    }
    return out;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path,
                             DtypePolicy policy = DtypePolicy::Preserve)
{
    const auto bytes = policy == DtypePolicy::Preserve ? encode_archive(ck)
                                                       : encode_archive(convert_dtypes(ck, policy));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Compatibility

enum class TensorStatus { Mergeable, CarryOver, Mismatched };

inline std::string_view status_name(TensorStatus s) noexcept
{
    switch (s) {
    case TensorStatus::Mergeable: return "mergeable";
    case TensorStatus::CarryOver: return "carry-over";
    case TensorStatus::Mismatched: return "mismatched";
    }
    return "?";
}

struct CompatibilityReport {
    struct Entry {
        TensorStatus status = TensorStatus::Mergeable;
        std::string reason; ///< empty unless mismatched
    };
    std::map<std::string, Entry> entries;

    std::vector<std::string> mergeable() const
    {
        std::vector<std::string> names;
        for (const auto& [name, e] : entries)
            if (e.status == TensorStatus::Mergeable) names.push_back(name);
        return names;
    }

    const std::pair<const std::string, Entry>* first_mismatch() const
    {
        for (const auto& kv : entries)
            if (kv.second.status == TensorStatus::Mismatched) return &kv;
        return nullptr;
    }

    /// Throws ValidationError naming the first mismatched tensor.
    void require_compatible() const
    {
        if (const auto* m = first_mismatch()) {
            throw ValidationError("tensor '" + m->first + "' is mismatched: " + m->second.reason);
        }
    }
};

/// Classifies every tensor name across the checkpoints. A name is mergeable
/// when it is a float tensor in every checkpoint with identical shapes;
/// carry-over when it is non-float everywhere it appears (or excluded);
/// mismatched otherwise.
inline CompatibilityReport validate_compatible(std::span<const Checkpoint* const> ckpts,
                                               const std::set<std::string>& excluded = {})
{
    if (ckpts.empty()) throw ValidationError("validate_compatible needs at least one checkpoint");
    CompatibilityReport report;
    std::set<std::string> names;
    for (const auto* c : ckpts)
        for (const auto& kv : c->tensors) names.insert(kv.first);

    for (const auto& name : names) {
        CompatibilityReport::Entry e;
        if (excluded.count(name)) {
            e.status = TensorStatus::CarryOver;
            report.entries.emplace(name, e);
            continue;
        }
        const Tensor* ref = nullptr;
        std::size_t present = 0;
        bool any_float = false, any_nonfloat = false, shape_differs = false;
        for (std::size_t i = 0; i < ckpts.size(); ++i) {
            auto it = ckpts[i]->tensors.find(name);
            if (it == ckpts[i]->tensors.end()) {
                if (e.reason.empty()) e.reason = "missing from checkpoint " + std::to_string(i);
                continue;
            }
            ++present;
            const Tensor& t = it->second;
            (is_float(t.dtype) ? any_float : any_nonfloat) = true;
            if (!ref) {
                ref = &t;
            } else if (t.shape != ref->shape) {
                shape_differs = true;
                e.reason = "shape " + shape_str(ref->shape) + " vs " + shape_str(t.shape);
            }
        }
        if (any_float && any_nonfloat) {
            e.status = TensorStatus::Mismatched;
            e.reason = "dtype class differs (float vs non-float)";
        } else if (any_nonfloat) {
            e.status = TensorStatus::CarryOver;
            e.reason.clear();
        } else if (shape_differs || present != ckpts.size()) {
            e.status = TensorStatus::Mismatched;
        } else {
            e.status = TensorStatus::Mergeable;
            e.reason.clear();
        }
        report.entries.emplace(name, std::move(e));
    }
    return report;
}

inline CompatibilityReport validate_compatible(std::span<const Checkpoint> ckpts,
                                               const std::set<std::string>& excluded = {})
{
    std::vector<const Checkpoint*> refs;
    for (const auto& c : ckpts) refs.push_back(&c);
    return validate_compatible(std::span<const Checkpoint* const>(refs), excluded);
}

} // namespace tensor_ties
