#include <doctest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "helpers.hpp"
#include "pivotmerge/error.hpp"
#include "pivotmerge/tensorstore.hpp"

using namespace pivotmerge;
using testutil::TempDir;

namespace {

std::string le64(std::uint64_t v) {
    std::string s(8, '\0');
    for (int i = 0; i < 8; ++i) s[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
    return s;
}

std::string raw_container(const std::string& header, const std::string& payload) {
    return le64(header.size()) + header + payload;
}

Tensor make(std::string name, std::vector<std::size_t> shape, std::vector<double> data, DType dtype = DType::Float64) {
    return Tensor{std::move(name), dtype, std::move(shape), std::move(data)};
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.name != b.name || a.dtype != b.dtype || a.shape != b.shape || a.data.size() != b.data.size()) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

Layer layer(const Matrix& w, std::optional<Vector> b) {
    return Layer{w, std::move(b)};
}

} // namespace

TEST_SUITE("tensorstore") {

TEST_CASE("roundtrip is bitwise exact, including awkward values") {
    TempDir dir;
    const double tiny = std::numeric_limits<double>::denorm_min();
    std::vector<Tensor> in{
        make("b", {2, 2}, {-0.0, tiny, 1.0 / 3.0, -1e308}),
        make("a", {3}, {0.5f, -2.25f, 1e-20f}, DType::Float32),
        make("scalar", {}, {7.0}),
        make("empty", {0, 4}, {}),
    };
    write_container(dir / "t.tensors", in);
    const auto out = read_container(dir / "t.tensors");
    REQUIRE(out.size() == in.size());
    // Returned in header order, which is sorted by name.
    CHECK(out[0].name == "a");
    CHECK(out[1].name == "b");
    CHECK(out[2].name == "empty");
    CHECK(out[3].name == "scalar");
    for (const auto& t : out) {
        auto it = std::find_if(in.begin(), in.end(), [&](const Tensor& x) { return x.name == t.name; });
        REQUIRE(it != in.end());
        CHECK(same_bits(t, *it));
    }
    CHECK(std::signbit(out[1].data[0]));
}

TEST_CASE("encoding is deterministic and independent of input order") {
    const auto a = make("x", {2}, {1, 2});
    const auto b = make("y", {1}, {3});
    CHECK(encode_container({a, b}) == encode_container({b, a}));
}

TEST_CASE("empty tensor list gives an empty header object") {
    const std::string bytes = encode_container({});
    CHECK(bytes == raw_container("{}", ""));
    CHECK(decode_container(bytes).empty());
}

TEST_CASE("float32 [2,3] tensor has a 24-byte payload") {
    const auto t = make("w", {2, 3}, {1, 2, 3, 4, 5, 6}, DType::Float32);
    const std::string bytes = encode_container({t});
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
    CHECK(bytes.size() == 8 + header_len + 24);
    float first = 0;
    std::memcpy(&first, bytes.data() + 8 + header_len, 4);
    CHECK(first == 1.0f);
}

TEST_CASE("writer rejects duplicate names and shape/data mismatches") {
    CHECK_THROWS_AS(encode_container({make("x", {1}, {1}), make("x", {1}, {2})}), FormatError);
    CHECK_THROWS_AS(encode_container({make("x", {2, 2}, {1, 2, 3})}), ShapeError);
}

TEST_CASE("malformed containers are rejected") {
    const std::string eight_bytes(8, '\0');
    SUBCASE("shorter than the length prefix") { CHECK_THROWS_AS(decode_container("abc"), FormatError); }
    SUBCASE("header length beyond file size") {
        CHECK_THROWS_AS(decode_container(le64(1000) + "{}"), FormatError);
    }
    SUBCASE("non-JSON header") { CHECK_THROWS_AS(decode_container(raw_container("not json", "")), FormatError); }
    SUBCASE("header is not an object") { CHECK_THROWS_AS(decode_container(raw_container("[1,2]", "")), FormatError); }
    SUBCASE("unknown dtype") {
        const std::string h = R"({"x":{"dtype":"int8","shape":[1],"data_offsets":[0,1]}})";
        CHECK_THROWS_AS(decode_container(raw_container(h, "a")), FormatError);
    }
    SUBCASE("byte range does not match shape") {
        const std::string h = R"({"x":{"dtype":"float64","shape":[2],"data_offsets":[0,8]}})";
        CHECK_THROWS_AS(decode_container(raw_container(h, eight_bytes)), FormatError);
    }
    SUBCASE("overlapping ranges") {
        const std::string h = R"({"x":{"dtype":"float64","shape":[1],"data_offsets":[0,8]},)"
                              R"("y":{"dtype":"float64","shape":[1],"data_offsets":[0,8]}})";
        CHECK_THROWS_AS(decode_container(raw_container(h, eight_bytes)), FormatError);
    }
    SUBCASE("payload truncated") {
        const std::string h = R"({"x":{"dtype":"float64","shape":[2],"data_offsets":[0,16]}})";
        CHECK_THROWS_AS(decode_container(raw_container(h, eight_bytes)), FormatError);
    }
    SUBCASE("trailing bytes") {
        const std::string h = R"({"x":{"dtype":"float64","shape":[1],"data_offsets":[0,8]}})";
        CHECK_THROWS_AS(decode_container(raw_container(h, eight_bytes + "zz")), FormatError);
    }
    SUBCASE("missing file") {
        TempDir dir;
        CHECK_THROWS_AS(read_container(dir / "nope.tensors"), IoError);
    }
}

TEST_CASE("well-formed two-layer checkpoint loads") {
    TempDir dir;
    std::vector<Tensor> ts{
        make("layer.1.weight", {4, 3}, std::vector<double>(12, 0.5)),
        make("layer.1.bias", {4}, {1, 2, 3, 4}),
        make("layer.2.weight", {5, 4}, std::vector<double>(20, -1.0)),
        make("layer.2.bias", {5}, {0, 0, 0, 0, 1}),
    };
    write_container(dir / "expert_a.tensors", ts);
    const auto ckpt = load_checkpoint(dir / "expert_a.tensors");
    CHECK(ckpt.id == "expert_a");
    REQUIRE(ckpt.layers.size() == 2);
    CHECK(ckpt.layers[0].weight.rows() == 4);
    CHECK(ckpt.layers[0].weight.cols() == 3);
    CHECK(ckpt.layers[1].bias->size() == 5);
    CHECK((*ckpt.layers[0].bias)(3) == 4.0);
    CHECK(ckpt.has_bias());
}

TEST_CASE("checkpoint layout violations are rejected") {
    SUBCASE("missing layer index") {
        std::vector<Tensor> ts{make("layer.1.weight", {2, 2}, {1, 2, 3, 4}), make("layer.3.weight", {2, 2}, {1, 2, 3, 4})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), ShapeError);
    }
    SUBCASE("bias on layer 1 only") {
        std::vector<Tensor> ts{make("layer.1.weight", {2, 2}, {1, 2, 3, 4}), make("layer.1.bias", {2}, {1, 1}),
                               make("layer.2.weight", {2, 2}, {1, 2, 3, 4})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), ShapeError);
    }
    SUBCASE("weight not 2-D") {
        std::vector<Tensor> ts{make("layer.1.weight", {4}, {1, 2, 3, 4})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), ShapeError);
    }
    SUBCASE("bias length differs from d_out") {
        std::vector<Tensor> ts{make("layer.1.weight", {2, 2}, {1, 2, 3, 4}), make("layer.1.bias", {3}, {1, 1, 1})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), ShapeError);
    }
    SUBCASE("broken shape chain") {
        std::vector<Tensor> ts{make("layer.1.weight", {3, 2}, std::vector<double>(6, 1.0)),
                               make("layer.2.weight", {2, 2}, {1, 2, 3, 4})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), ShapeError);
    }
    SUBCASE("stray tensor names") {
        std::vector<Tensor> ts{make("layer.1.weight", {2, 2}, {1, 2, 3, 4}), make("extra", {1}, {0})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), FormatError);
    }
    SUBCASE("layer index 0") {
        std::vector<Tensor> ts{make("layer.0.weight", {2, 2}, {1, 2, 3, 4})};
        CHECK_THROWS(checkpoint_from_tensors(ts, "x"));
    }
    SUBCASE("non-finite values") {
        std::vector<Tensor> ts{make("layer.1.weight", {1, 1}, {std::numeric_limits<double>::quiet_NaN()})};
        CHECK_THROWS_AS(checkpoint_from_tensors(ts, "x"), NumericalError);
    }
}

TEST_CASE("require_same_layout compares shapes and bias presence") {
    ProjectorCheckpoint a{"a", {layer(Matrix::Ones(2, 3), Vector::Ones(2))}};
    ProjectorCheckpoint b{"b", {layer(Matrix::Zero(2, 3), Vector::Zero(2))}};
    ProjectorCheckpoint c{"c", {layer(Matrix::Zero(2, 3), std::nullopt)}};
    ProjectorCheckpoint d{"d", {layer(Matrix::Zero(3, 3), Vector::Zero(3))}};
    CHECK_NOTHROW(require_same_layout(a, b));
    CHECK_THROWS_AS(require_same_layout(a, c), ShapeError);
    CHECK_THROWS_AS(require_same_layout(a, d), ShapeError);
}

TEST_CASE("save then load keeps dtype and values") {
    TempDir dir;
    ProjectorCheckpoint c{"m", {layer(testutil::random_matrix(3, 2, 1), Vector::LinSpaced(3, -1, 1)),
                                layer(testutil::random_matrix(2, 3, 2), Vector::Ones(2))}};
    save_checkpoint(dir / "m.tensors", c);
    const auto back = load_checkpoint(dir / "m.tensors");
    CHECK(back.dtype == DType::Float64);
    for (std::size_t l = 0; l < 2; ++l) {
        CHECK(back.layers[l].weight == c.layers[l].weight);
        CHECK(*back.layers[l].bias == *c.layers[l].bias);
    }

    c.dtype = DType::Float32;
    save_checkpoint(dir / "f.tensors", c);
    const auto f = load_checkpoint(dir / "f.tensors");
    CHECK(f.dtype == DType::Float32);
    CHECK(f.layers[0].weight(1, 1) == static_cast<double>(static_cast<float>(c.layers[0].weight(1, 1))));
}

TEST_CASE("augment and split") {
    Matrix w(2, 2);
    w << 1, 2, 3, 4;
    Vector b(2);
    b << 5, 6;
    const AugmentedLayer aug = augment(Layer{w, b});
    Matrix want(2, 3);
    want << 1, 2, 5, 3, 4, 6;
    CHECK(aug.matrix == want);
    CHECK(aug.had_bias);

    const Layer back = split(aug);
    CHECK(back.weight == w);
    CHECK(*back.bias == b);

    const AugmentedLayer plain = augment(Layer{w, std::nullopt});
    CHECK(plain.matrix == w);
    CHECK_FALSE(plain.had_bias);
    CHECK_FALSE(split(plain).bias.has_value());

    const AugmentedLayer again = augment(split(aug));
    CHECK(again.matrix == aug.matrix);
    CHECK(again.had_bias == aug.had_bias);

    CHECK_THROWS_AS(augment(Layer{w, Vector::Ones(3)}), ShapeError);
}

TEST_CASE("matrix/tensor conversion is row-major") {
    Matrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    const Tensor t = matrix_to_tensor("m", m, DType::Float64);
    CHECK(t.data == std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(tensor_to_matrix(t) == m);
}

}
