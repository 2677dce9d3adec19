#pragma once

// Tensor container format and the projector-checkpoint data model.
//
// Container layout:
//   [u64 little-endian header length H]
//   [H bytes of UTF-8 JSON: {"<name>": {"dtype": "float32"|"float64",
//                                       "shape": [...],
//                                       "data_offsets": [begin, end]}, ...}]
//   [payload: raw little-endian values, tensors densely packed]
// Header keys are emitted in sorted order and the payload follows the same
// order, so identical inputs always produce identical bytes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pivotmerge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class DType { Float32, Float64 };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);

// Values are held as doubles regardless of dtype; float32 tensors hold
// values that are exactly representable in float32.
struct Tensor {
    std::string name;
    DType dtype = DType::Float64;
    std::vector<std::size_t> shape;
    std::vector<double> data; // row-major

    std::size_t element_count() const;
};

void write_container(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> read_container(const std::filesystem::path& path);

// In-memory forms of the same format; write_container/read_container are
// thin wrappers around these.
std::string encode_container(const std::vector<Tensor>& tensors);
std::vector<Tensor> decode_container(std::string_view bytes);

struct Layer {
    Matrix weight; // d_out x d_in
    std::optional<Vector> bias; // length d_out
};

struct ProjectorCheckpoint {
    std::string id;
    std::vector<Layer> layers;
    DType dtype = DType::Float64;

    bool has_bias() const { return !layers.empty() && layers.front().bias.has_value(); }
};

// Validates the shape chain and uniform bias presence. Throws ShapeError.
void validate_checkpoint(const ProjectorCheckpoint& checkpoint);

// Throws ShapeError unless `other` has the same per-layer shapes and bias
// presence as `reference`.
void require_same_layout(const ProjectorCheckpoint& reference, const ProjectorCheckpoint& other);

// Builds a checkpoint from tensors named "layer.{l}.weight" / "layer.{l}.bias"
// with 1-based contiguous l.
ProjectorCheckpoint checkpoint_from_tensors(const std::vector<Tensor>& tensors, std::string id);
std::vector<Tensor> checkpoint_to_tensors(const ProjectorCheckpoint& checkpoint);

// The checkpoint id is the file stem.
ProjectorCheckpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const std::filesystem::path& path, const ProjectorCheckpoint& checkpoint);

// Weight with the bias appended as the last column.
struct AugmentedLayer {
    Matrix matrix;
    bool had_bias = false;
};

AugmentedLayer augment(const Layer& layer);
Layer split(const AugmentedLayer& aug);

// Helpers to move between Eigen (column-major) and row-major tensors.
Tensor matrix_to_tensor(std::string name, const Matrix& m, DType dtype);
Matrix tensor_to_matrix(const Tensor& t);

} // namespace pivotmerge
