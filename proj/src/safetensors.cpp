#include "causalscope/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "causalscope/error.hpp"

namespace causalscope::safetensors {

namespace {

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    return 0;
}

std::uint64_t read_le_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

} // namespace

std::int64_t TensorInfo::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // Subnormal: renormalize.
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::int32_t exp = static_cast<std::int32_t>((bits >> 23) & 0xFFu) - 127 + 15;
    std::uint32_t mant = bits & 0x7FFFFFu;
    if (((bits >> 23) & 0xFFu) == 0xFFu) return sign | 0x7C00u | (mant ? 0x200u : 0u);
    if (exp >= 0x1F) return sign | 0x7C00u;
    if (exp <= 0) {
        if (exp < -10) return sign;
        mant |= 0x800000u;
        const int shift = 14 - exp;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
        return sign | static_cast<std::uint16_t>(half_mant);
    }
    std::uint32_t out = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) ++out;
    return sign | static_cast<std::uint16_t>(out);
}

float bfloat16_to_float(std::uint16_t h) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

File::File(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw LoadError(fmt::format("cannot open checkpoint {}", path_.string()));
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8) throw LoadError(fmt::format("{}: truncated file (no header length)", path_.string()));
    unsigned char lenbuf[8];
    in.read(reinterpret_cast<char*>(lenbuf), 8);
    const auto header_len = read_le_u64(lenbuf);
    if (header_len > file_size - 8) {
        throw LoadError(fmt::format("{}: truncated file (header length {} exceeds file size)", path_.string(), header_len));
    }
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw LoadError(fmt::format("{}: malformed header JSON: {}", path_.string(), e.what()));
    }
    if (!doc.is_object()) throw LoadError(fmt::format("{}: header is not a JSON object", path_.string()));

    data_start_ = 8 + header_len;
    data_size_ = file_size - data_start_;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.key() == "__metadata__") continue;
        const auto& v = it.value();
        try {
            TensorInfo info;
            info.dtype = v.at("dtype").get<std::string>();
            info.shape = v.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = v.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2) throw LoadError("data_offsets must have two entries");
            info.begin = offsets[0];
            info.end = offsets[1];
            tensors_.emplace(it.key(), std::move(info));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(fmt::format("{}: bad header entry for tensor {}: {}", path_.string(), it.key(), e.what()));
        }
    }
}

const TensorInfo& File::info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError(fmt::format("missing tensor {}", name));
    return it->second;
}

std::vector<float> File::read_f32(const std::string& name) const {
    const auto& ti = info(name);
    const auto width = dtype_size(ti.dtype);
    if (width == 0) throw LoadError(fmt::format("tensor {}: unsupported dtype {}", name, ti.dtype));
    const auto n = static_cast<std::uint64_t>(ti.numel());
    if (ti.end < ti.begin || ti.end - ti.begin != n * width) {
        throw LoadError(fmt::format("tensor {}: byte range [{}, {}) does not match shape", name, ti.begin, ti.end));
    }
    if (ti.end > data_size_) {
        throw LoadError(fmt::format("tensor {}: truncated file (needs {} data bytes, have {})", name, ti.end, data_size_));
    }

    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_start_ + ti.begin));
    std::vector<unsigned char> raw(n * width);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw LoadError(fmt::format("tensor {}: read failed (truncated file?)", name));

    std::vector<float> out(n);
    if (ti.dtype == "F32") {
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint32_t bits = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
            out[i] = std::bit_cast<float>(bits);
        }
    } else {
        const bool bf = ti.dtype == "BF16";
        for (std::uint64_t i = 0; i < n; ++i) {
            const auto h = static_cast<std::uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
            out[i] = bf ? bfloat16_to_float(h) : half_to_float(h);
        }
    }
    return out;
}

void write(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, DType dtype) {
    const std::size_t width = dtype == DType::f32 ? 4 : 2;
    const char* dtype_name = dtype == DType::f32 ? "F32" : (dtype == DType::f16 ? "F16" : "BF16");

    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        const auto bytes = t.values.size() * width;
        header[t.name] = {{"dtype", dtype_name}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    while ((8 + text.size()) % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError(fmt::format("cannot write {}", path.string()));
    unsigned char lenbuf[8];
    std::uint64_t len = text.size();
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    std::vector<unsigned char> buf;
    for (const auto& t : tensors) {
        buf.resize(t.values.size() * width);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            if (dtype == DType::f32) {
                const auto bits = std::bit_cast<std::uint32_t>(t.values[i]);
                for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
            } else {
                const std::uint16_t h = dtype == DType::f16
                                            ? float_to_half(t.values[i])
                                            : static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(t.values[i]) >> 16);
                buf[2 * i] = static_cast<unsigned char>(h & 0xFF);
                buf[2 * i + 1] = static_cast<unsigned char>(h >> 8);
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw LoadError(fmt::format("write failed for {}", path.string()));
}

} // namespace causalscope::safetensors
