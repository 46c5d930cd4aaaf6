#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "tensor_ties/error.hpp"

namespace tensor_ties {

static_assert(std::endian::native == std::endian::little,
              "archive buffers are decoded in place and assume a little-endian host");

enum class DType : std::uint8_t {
    F16,
    BF16,
    F32,
    F64,
    I8,
    I16,
    I32,
    I64,
    U8,
    Bool,
};

inline constexpr std::string_view dtype_name(DType dt) noexcept
{
    switch (dt) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    case DType::I8: return "I8";
    case DType::I16: return "I16";
    case DType::I32: return "I32";
    case DType::I64: return "I64";
    case DType::U8: return "U8";
    case DType::Bool: return "BOOL";
    }
    return "?";
}

inline std::optional<DType> parse_dtype(std::string_view s) noexcept
{
    for (auto dt : {DType::F16, DType::BF16, DType::F32, DType::F64, DType::I8, DType::I16,
                    DType::I32, DType::I64, DType::U8, DType::Bool}) {
        if (dtype_name(dt) == s) return dt;
    }
    return std::nullopt;
}

inline constexpr std::size_t dtype_size(DType dt) noexcept
{
    switch (dt) {
    case DType::F16:
    case DType::BF16:
    case DType::I16: return 2;
    case DType::F32:
    case DType::I32: return 4;
    case DType::F64:
    case DType::I64: return 8;
    case DType::I8:
    case DType::U8:
    case DType::Bool: return 1;
    }
    return 0;
}

inline constexpr bool is_float(DType dt) noexcept
{
    return dt == DType::F16 || dt == DType::BF16 || dt == DType::F32 || dt == DType::F64;
}

// IEEE-754 binary16 <-> binary32, round-to-nearest-even on the narrowing side.

inline float half_to_float(std::uint16_t h) noexcept
{
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalise
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while ((mant & 0x400u) == 0);
            mant &= 0x3ffu;
            bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
        }
    } else {
        bits = sign | ((exp + (127 - 15)) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f) noexcept
{
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7fffffffu;

    if (abs >= 0x7f800000u) { // inf or nan
        return static_cast<std::uint16_t>(sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u));
    }
    if (abs >= 0x477ff000u) { // >= 65520 rounds to inf
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (abs < 0x38800000u) { // below smallest normal half: subnormal or zero
        if (abs < 0x33000000u) return sign; // < 2^-25 rounds to zero
        const std::uint32_t e = abs >> 23;
        const std::uint32_t m = (abs & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126 - e; // 14..24
        std::uint32_t half_m = m >> shift;
        const std::uint32_t rem = m & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_m & 1u))) ++half_m;
        return static_cast<std::uint16_t>(sign | half_m);
    }
    std::uint32_t r = abs - ((127u - 15u) << 23);
    const std::uint32_t lsb = (r >> 13) & 1u;
    r += 0xfffu + lsb;
    return static_cast<std::uint16_t>(sign | (r >> 13));
}

inline float bf16_to_float(std::uint16_t b) noexcept
{
    return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

inline std::uint16_t float_to_bf16(float f) noexcept
{
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((x >> 16) | 0x40u); // quiet nan
    }
    const std::uint32_t lsb = (x >> 16) & 1u;
    return static_cast<std::uint16_t>((x + 0x7fffu + lsb) >> 16);
}

namespace detail {

template <class T>
T load_le(const std::byte* p) noexcept
{
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <class T>
void store_le(std::byte* p, T v) noexcept
{
    std::memcpy(p, &v, sizeof(T));
}

} // namespace detail

/// Decodes one element of a float dtype to float32. F64 is rounded to nearest.
inline float decode_float(DType dt, const std::byte* p) noexcept
{
    switch (dt) {
    case DType::F16: return half_to_float(detail::load_le<std::uint16_t>(p));
    case DType::BF16: return bf16_to_float(detail::load_le<std::uint16_t>(p));
    case DType::F32: return detail::load_le<float>(p);
    case DType::F64: return static_cast<float>(detail::load_le<double>(p));
    default: return 0.0f;
    }
}

/// Encodes a float32 value into a float dtype. Returns false when a finite
/// value becomes infinite (overflow on narrowing).
inline bool encode_float(DType dt, float v, std::byte* p) noexcept
{
    switch (dt) {
    case DType::F16: {
        const auto h = float_to_half(v);
        detail::store_le(p, h);
        return !std::isfinite(v) || (h & 0x7c00u) != 0x7c00u;
    }
    case DType::BF16: {
        const auto b = float_to_bf16(v);
        detail::store_le(p, b);
        return !std::isfinite(v) || (b & 0x7f80u) != 0x7f80u;
    }
    case DType::F32: detail::store_le(p, v); return true;
    case DType::F64: detail::store_le(p, static_cast<double>(v)); return true;
    default: return false;
    }
}

} // namespace tensor_ties
