#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace causalscope::safetensors {

enum class DType { f32, f16, bf16 };

struct TensorInfo {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::int64_t numel() const;
};

// Parsed header of a safetensors container; tensor payloads are read lazily.
class File {
public:
    explicit File(std::filesystem::path path);

    const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
    bool contains(const std::string& name) const { return tensors_.contains(name); }
    const TensorInfo& info(const std::string& name) const;

    // Payload up-cast to float32. Throws LoadError naming the tensor on
    // unsupported dtype, bad offsets or a truncated file.
    std::vector<float> read_f32(const std::string& name) const;

private:
    std::filesystem::path path_;
    std::uint64_t data_start_ = 0;
    std::uint64_t data_size_ = 0;
    std::map<std::string, TensorInfo> tensors_;
};

struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values;
};

// Writes tensors in the order given, float32 or float16 payloads.
void write(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, DType dtype = DType::f32);

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bfloat16_to_float(std::uint16_t h);

} // namespace causalscope::safetensors
