#include "pivotmerge/tensorstore.hpp"

#include "pivotmerge/error.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>

namespace pivotmerge {
namespace {

using json = nlohmann::json;

template <class UInt>
UInt to_little(UInt v) {
    if constexpr (std::endian::native == std::endian::big) {
        UInt out = 0;
        for (std::size_t i = 0; i < sizeof(UInt); ++i) {
            out = static_cast<UInt>((out << 8) | ((v >> (8 * i)) & 0xFF));
        }
        return out;
    } else {
        return v;
    }
}

template <class UInt>
void append_le(std::string& out, UInt v) {
    v = to_little(v);
    char buf[sizeof(UInt)];
    std::memcpy(buf, &v, sizeof(UInt));
    out.append(buf, sizeof(UInt));
}

template <class UInt>
UInt read_le(const char* p) {
    UInt v;
    std::memcpy(&v, p, sizeof(UInt));
    return to_little(v);
}

std::size_t checked_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
            throw FormatError("tensor shape overflows size_t");
        }
        n *= d;
    }
    return n;
}

// Parses "layer.{l}.weight" / "layer.{l}.bias"; returns l (1-based) or 0.
std::size_t parse_layer_name(const std::string& name, std::string& kind) {
    constexpr std::string_view prefix = "layer.";
    if (name.rfind(prefix, 0) != 0) return 0;
    auto rest = std::string_view(name).substr(prefix.size());
    auto dot = rest.find('.');
    if (dot == std::string_view::npos || dot == 0) return 0;
    std::size_t idx = 0;
    auto digits = rest.substr(0, dot);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), idx);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.front() == '0') return 0;
    kind = std::string(rest.substr(dot + 1));
    return idx;
}

} // namespace

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
    case DType::Float32: return "float32";
    case DType::Float64: return "float64";
    }
    return "float64";
}

DType parse_dtype(std::string_view name) {
    if (name == "float32") return DType::Float32;
    if (name == "float64") return DType::Float64;
    throw FormatError("unknown dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) {
    return dtype == DType::Float32 ? 4 : 8;
}

std::size_t Tensor::element_count() const {
    return checked_product(shape);
}

std::string encode_container(const std::vector<Tensor>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : tensors) {
        if (!by_name.emplace(t.name, &t).second) {
            throw FormatError("duplicate tensor name '" + t.name + "'");
        }
        if (t.element_count() != t.data.size()) {
            throw ShapeError("tensor '" + t.name + "': shape implies " + std::to_string(t.element_count()) +
                             " values but " + std::to_string(t.data.size()) + " are stored");
        }
    }

    json header = json::object();
    std::string payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : by_name) {
        const std::uint64_t bytes = t->data.size() * dtype_size(t->dtype);
        header[name] = {
            {"dtype", dtype_name(t->dtype)},
            {"shape", t->shape},
            {"data_offsets", {offset, offset + bytes}},
        };
        payload.reserve(payload.size() + bytes);
        if (t->dtype == DType::Float32) {
            for (double v : t->data) {
                append_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            }
        } else {
            for (double v : t->data) {
                append_le(payload, std::bit_cast<std::uint64_t>(v));
            }
        }
        offset += bytes;
    }

    const std::string text = header.dump();
    std::string out;
    out.reserve(8 + text.size() + payload.size());
    append_le(out, static_cast<std::uint64_t>(text.size()));
    out += text;
    out += payload;
    return out;
}

std::vector<Tensor> decode_container(std::string_view bytes) {
    if (bytes.size() < 8) {
        throw FormatError("truncated container: missing header length");
    }
    const auto header_len = read_le<std::uint64_t>(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw FormatError("truncated container: header length " + std::to_string(header_len) +
                          " exceeds file size");
    }
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("malformed container header: ") + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("malformed container header: expected a JSON object");
    }
    const std::string_view payload = bytes.substr(8 + header_len);

    struct Entry {
        std::uint64_t begin, end;
        Tensor tensor;
    };
    std::vector<Entry> entries;
    entries.reserve(header.size());
    for (const auto& [name, info] : header.items()) {
        try {
            Entry e;
            e.tensor.name = name;
            e.tensor.dtype = parse_dtype(info.at("dtype").get<std::string>());
            e.tensor.shape = info.at("shape").get<std::vector<std::size_t>>();
            const auto& offs = info.at("data_offsets");
            if (!offs.is_array() || offs.size() != 2) {
                throw FormatError("tensor '" + name + "': data_offsets must be [begin, end]");
            }
            e.begin = offs[0].get<std::uint64_t>();
            e.end = offs[1].get<std::uint64_t>();
            if (e.end < e.begin) {
                throw FormatError("tensor '" + name + "': data_offsets end precedes begin");
            }
            const std::uint64_t expected = e.tensor.element_count() * dtype_size(e.tensor.dtype);
            if (e.end - e.begin != expected) {
                throw FormatError("tensor '" + name + "': byte range does not match shape");
            }
            entries.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw FormatError("tensor '" + name + "': malformed header entry: " + ex.what());
        }
    }

    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.begin < b.begin || (a.begin == b.begin && a.end < b.end); });
    std::uint64_t cursor = 0;
    for (const auto& e : entries) {
        if (e.begin < cursor) {
            throw FormatError("tensor '" + e.tensor.name + "': overlapping byte ranges");
        }
        if (e.begin > cursor) {
            throw FormatError("tensor '" + e.tensor.name + "': gap in payload before byte range");
        }
        cursor = e.end;
    }
    if (cursor > payload.size()) {
        throw FormatError("truncated container: payload shorter than declared byte ranges");
    }
    if (cursor < payload.size()) {
        throw FormatError("container has trailing bytes after the last tensor");
    }

    std::vector<Tensor> out;
    out.reserve(entries.size());
    for (auto& e : entries) {
        auto& t = e.tensor;
        const std::size_t n = t.element_count();
        t.data.resize(n);
        const char* p = payload.data() + e.begin;
        if (t.dtype == DType::Float32) {
            for (std::size_t i = 0; i < n; ++i) {
                t.data[i] = static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(p + 4 * i)));
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                t.data[i] = std::bit_cast<double>(read_le<std::uint64_t>(p + 8 * i));
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

void write_container(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
    const std::string bytes = encode_container(tensors);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

std::vector<Tensor> read_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (is.bad()) {
        throw IoError("failed reading '" + path.string() + "'");
    }
    return decode_container(bytes);
}

Tensor matrix_to_tensor(std::string name, const Matrix& m, DType dtype) {
    Tensor t;
    t.name = std::move(name);
    t.dtype = dtype;
    t.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), m.rows(),
                                                                                         m.cols()) = m;
    return t;
}

Matrix tensor_to_matrix(const Tensor& t) {
    if (t.shape.size() != 2) {
        throw ShapeError("tensor '" + t.name + "' is not 2-D");
    }
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    const auto cols = static_cast<Eigen::Index>(t.shape[1]);
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(),
                                                                                                   rows, cols);
}

void validate_checkpoint(const ProjectorCheckpoint& checkpoint) {
    const auto& layers = checkpoint.layers;
    if (layers.empty()) {
        throw ShapeError("checkpoint '" + checkpoint.id + "' has no layers");
    }
    const bool bias = layers.front().bias.has_value();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const std::string where = "checkpoint '" + checkpoint.id + "' layer " + std::to_string(l + 1);
        if (layer.bias.has_value() != bias) {
            throw ShapeError(where + ": bias presence differs from layer 1 (inconsistent augmentation)");
        }
        if (layer.bias && layer.bias->size() != layer.weight.rows()) {
            throw ShapeError(where + ": bias length " + std::to_string(layer.bias->size()) + " != d_out " +
                             std::to_string(layer.weight.rows()));
        }
        if (l > 0 && layer.weight.cols() != layers[l - 1].weight.rows()) {
            throw ShapeError(where + ": d_in " + std::to_string(layer.weight.cols()) +
                             " does not match previous layer d_out " + std::to_string(layers[l - 1].weight.rows()));
        }
        if (!layer.weight.allFinite() || (layer.bias && !layer.bias->allFinite())) {
            throw NumericalError(where + ": non-finite parameter values");
        }
    }
}

void require_same_layout(const ProjectorCheckpoint& reference, const ProjectorCheckpoint& other) {
    if (reference.layers.size() != other.layers.size()) {
        throw ShapeError("checkpoint '" + other.id + "' has " + std::to_string(other.layers.size()) +
                         " layers, expected " + std::to_string(reference.layers.size()));
    }
    for (std::size_t l = 0; l < reference.layers.size(); ++l) {
        const auto& a = reference.layers[l];
        const auto& b = other.layers[l];
        if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) {
            throw ShapeError("checkpoint '" + other.id + "' layer " + std::to_string(l + 1) +
                             ": weight shape differs from '" + reference.id + "'");
        }
        if (a.bias.has_value() != b.bias.has_value()) {
            throw ShapeError("checkpoint '" + other.id + "' layer " + std::to_string(l + 1) +
                             ": bias presence differs from '" + reference.id + "'");
        }
    }
}

ProjectorCheckpoint checkpoint_from_tensors(const std::vector<Tensor>& tensors, std::string id) {
    std::map<std::size_t, const Tensor*> weights;
    std::map<std::size_t, const Tensor*> biases;
    std::set<DType> dtypes;
    for (const auto& t : tensors) {
        std::string kind;
        const std::size_t idx = parse_layer_name(t.name, kind);
        if (idx == 0 || (kind != "weight" && kind != "bias")) {
            throw FormatError("unexpected tensor '" + t.name + "' in checkpoint '" + id + "'");
        }
        (kind == "weight" ? weights : biases)[idx] = &t;
        dtypes.insert(t.dtype);
    }
    if (weights.empty()) {
        throw ShapeError("checkpoint '" + id + "' contains no layer weights");
    }
    const std::size_t count = weights.rbegin()->first;
    for (std::size_t l = 1; l <= count; ++l) {
        if (!weights.count(l)) {
            throw ShapeError("checkpoint '" + id + "': missing layer." + std::to_string(l) + ".weight");
        }
    }
    for (const auto& [idx, t] : biases) {
        if (!weights.count(idx)) {
            throw ShapeError("checkpoint '" + id + "': bias for layer " + std::to_string(idx) + " without weight");
        }
    }

    ProjectorCheckpoint ckpt;
    ckpt.id = std::move(id);
    ckpt.dtype = dtypes.count(DType::Float64) ? DType::Float64 : DType::Float32;
    for (std::size_t l = 1; l <= count; ++l) {
        const Tensor& w = *weights.at(l);
        if (w.shape.size() != 2) {
            throw ShapeError("checkpoint '" + ckpt.id + "': layer." + std::to_string(l) + ".weight is not 2-D");
        }
        Layer layer;
        layer.weight = tensor_to_matrix(w);
        if (auto it = biases.find(l); it != biases.end()) {
            const Tensor& b = *it->second;
            if (b.shape.size() != 1) {
                throw ShapeError("checkpoint '" + ckpt.id + "': layer." + std::to_string(l) + ".bias is not 1-D");
            }
            layer.bias = Eigen::Map<const Vector>(b.data.data(), static_cast<Eigen::Index>(b.data.size()));
        }
        ckpt.layers.push_back(std::move(layer));
    }
    validate_checkpoint(ckpt);
    return ckpt;
}

std::vector<Tensor> checkpoint_to_tensors(const ProjectorCheckpoint& checkpoint) {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < checkpoint.layers.size(); ++l) {
        const auto& layer = checkpoint.layers[l];
        const std::string prefix = "layer." + std::to_string(l + 1);
        out.push_back(matrix_to_tensor(prefix + ".weight", layer.weight, checkpoint.dtype));
        if (layer.bias) {
            Tensor b;
            b.name = prefix + ".bias";
            b.dtype = checkpoint.dtype;
            b.shape = {static_cast<std::size_t>(layer.bias->size())};
            b.data.assign(layer.bias->data(), layer.bias->data() + layer.bias->size());
            out.push_back(std::move(b));
        }
    }
    return out;
}

ProjectorCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_tensors(read_container(path), path.stem().string());
}

void save_checkpoint(const std::filesystem::path& path, const ProjectorCheckpoint& checkpoint) {
    validate_checkpoint(checkpoint);
    write_container(path, checkpoint_to_tensors(checkpoint));
}

AugmentedLayer augment(const Layer& layer) {
    AugmentedLayer aug;
    aug.had_bias = layer.bias.has_value();
    if (!aug.had_bias) {
        aug.matrix = layer.weight;
        return aug;
    }
    if (layer.bias->size() != layer.weight.rows()) {
        throw ShapeError("bias length " + std::to_string(layer.bias->size()) + " != d_out " +
                         std::to_string(layer.weight.rows()));
    }
    aug.matrix.resize(layer.weight.rows(), layer.weight.cols() + 1);
    aug.matrix.leftCols(layer.weight.cols()) = layer.weight;
    aug.matrix.col(layer.weight.cols()) = *layer.bias;
    return aug;
}

Layer split(const AugmentedLayer& aug) {
    Layer layer;
    if (!aug.had_bias) {
        layer.weight = aug.matrix;
        return layer;
    }
    const auto cols = aug.matrix.cols() - 1;
    layer.weight = aug.matrix.leftCols(cols);
    layer.bias = aug.matrix.col(cols);
    return layer;
}

} // namespace pivotmerge
