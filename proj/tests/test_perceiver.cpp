#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dense_oracle.hpp"
#include "medcorpus/perceiver.hpp"
#include "support.hpp"

using namespace medcorpus;
using namespace medcorpus::perceiver;
using testing_support::dense_attention;
using testing_support::max_abs_diff;
using testing_support::random_matrix;

namespace {

AttentionWeights<double> random_weights(std::uint64_t seed, std::size_t d, std::size_t dv) {
    return {random_matrix(seed, d, d), random_matrix(seed + 1, d, dv), random_matrix(seed + 2, d, dv)};
}

PerceiverConfig small_config() {
    PerceiverConfig c;
    c.latents = 4;
    c.width = 16;
    c.vision_dim = 8;
    c.layers = 2;
    c.max_frames = 8;
    c.image = 28;
    c.seed = 5;
    return c;
}

VisionEmbeddings<double> random_embeddings(const PerceiverConfig& c, std::size_t frames, std::uint64_t seed) {
    return {frames, random_matrix(seed, frames * c.patches_per_frame(), c.vision_dim)};
}

Matrix<double> gelu_ffn_oracle(const Matrix<double>& h, const LayerParams<double>& p) {
    Matrix<double> out = h;
    const std::size_t hid = p.ffn_in.rows;
    for (std::size_t i = 0; i < h.rows; ++i) {
        std::vector<double> mid(hid);
        for (std::size_t j = 0; j < hid; ++j) {
            double s = p.ffn_in_bias[j];
            for (std::size_t c = 0; c < h.cols; ++c) s += p.ffn_in(j, c) * h(i, c);
            mid[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
        }
        for (std::size_t c = 0; c < h.cols; ++c) {
            double s = p.ffn_out_bias[c];
            for (std::size_t j = 0; j < hid; ++j) s += p.ffn_out(c, j) * mid[j];
            out(i, c) += s;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("matrix helpers") {
    const auto a = random_matrix(1, 3, 4), b = random_matrix(2, 4, 5), c = random_matrix(3, 5, 4);
    const auto ab = matmul(a, b);
    CHECK(ab.rows == 3);
    CHECK(ab.cols == 5);
    CHECK(max_abs_diff(matmul_bt(a, c), matmul(a, transpose(c))) < 1e-14);
    CHECK(max_abs_diff(matmul_at(b, transpose(a)), transpose(ab)) < 1e-14);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("procedural matrices are pure functions of key and position") {
    const ProceduralMatrix p{77, 5, 7, 0.3};
    const auto m = p.materialize<double>();
    std::vector<double> row(7);
    p.fill_row<double>(3, std::span<double>(row));
    for (std::size_t j = 0; j < 7; ++j) {
        CHECK(row[j] == m(3, j));
        CHECK(std::abs(m(3, j)) <= 0.3);
    }
    CHECK(m(0, 0) == 0.3 * counter_uniform(77, 0));
    CHECK(m(4, 6) == 0.3 * counter_uniform(77, 4 * 7 + 6));
    CHECK(m(2, 1) == 0.3 * counter_uniform(77, 2 * 7 + 1));
}

TEST_CASE("cross-attention matches the dense oracle") {
    for (std::size_t heads : {1, 2, 4}) {
        const auto h = random_matrix(10, 3, 8), x = random_matrix(11, 5, 6);
        const auto w = random_weights(12, 8, 6);
        std::vector<Matrix<double>> probs;
        const auto expected = dense_attention(h, x, w, heads, &probs);
        const auto got = cross_attention(h, x, w, heads);
        CHECK(max_abs_diff(got.output, expected) <= 1e-12);
        REQUIRE(got.weights.size() == heads);
        for (std::size_t k = 0; k < heads; ++k) CHECK(max_abs_diff(got.weights[k], probs[k]) <= 1e-12);
    }
}

TEST_CASE("attention weights are a distribution and outputs stay in the value hull") {
    const auto h = random_matrix(20, 4, 6), x = random_matrix(21, 9, 5);
    const auto w = random_weights(22, 6, 5);
    const auto out = cross_attention(h, x, w, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t n = 0; n < 9; ++n) {
            CHECK(out.weights[0](i, n) >= 0.0);
            s += out.weights[0](i, n);
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    const auto v = matmul_bt(x, w.value);
    for (std::size_t c = 0; c < 6; ++c) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t n = 0; n < 9; ++n) {
            lo = std::min(lo, v(n, c));
            hi = std::max(hi, v(n, c));
        }
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(out.output(i, c) >= lo - 1e-12);
            CHECK(out.output(i, c) <= hi + 1e-12);
        }
    }
}

TEST_CASE("attention degenerate cases") {
    const auto h = random_matrix(30, 2, 4);
    const auto w = random_weights(31, 4, 3);
    const auto one = random_matrix(32, 1, 3);
    const auto single = cross_attention(h, one, w, 1);
    CHECK(single.weights[0](0, 0) == 1.0);
    CHECK(single.weights[0](1, 0) == 1.0);
    Matrix<double> twin(2, 3);
    for (std::size_t c = 0; c < 3; ++c) twin(0, c) = twin(1, c) = one(0, c);
    const auto tied = cross_attention(h, twin, w, 1);
    CHECK(tied.weights[0](0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tied.weights[0](1, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("attention input validation") {
    const auto h = random_matrix(40, 2, 4);
    const auto w = random_weights(41, 4, 3);
    auto x = random_matrix(42, 3, 3);
    CHECK_THROWS_AS(cross_attention(h, random_matrix(43, 3, 5), w, 1), ShapeError);
    CHECK_THROWS_AS(cross_attention(h, x, w, 3), ShapeError);
    x(1, 1) = NAN;
    CHECK_THROWS_AS(cross_attention(h, x, w, 1), ValidationError);
    x(1, 1) = INFINITY;
    CHECK_THROWS_AS(cross_attention(h, x, w, 1), ValidationError);
}

TEST_CASE("patch embedding shapes and zero input") {
    PerceiverConfig c;
    c.vision_dim = 8;
    const auto e = PatchEmbedder<float>::make(c);
    CHECK(e.projection.rows == 196);
    imaging::Volume frame({1, 336, 336}, imaging::Unit::Normalized);
    const auto one = patch_embed(frame, e);
    CHECK(one.frames == 1);
    CHECK(one.tokens.rows == 576);
    CHECK(one.tokens.cols == 8);
    for (float v : one.tokens.data) CHECK(v == 0.0f);
    imaging::Volume ct({30, 336, 336}, imaging::Unit::Normalized, 0.5f);
    CHECK(patch_embed(ct, e).tokens.rows == 17280);
    CHECK(30 * c.patches_per_frame() == 17280);
    imaging::Volume wrong({1, 224, 224}, imaging::Unit::Normalized);
    CHECK_THROWS_AS(patch_embed(wrong, e), ShapeError);
}

TEST_CASE("patch embedding is the linear map of each 14x14 patch") {
    PerceiverConfig c;
    c.vision_dim = 3;
    auto e = PatchEmbedder<double>::make(c);
    imaging::Volume v({1, 336, 336}, imaging::Unit::Normalized);
    v.at(0, 14 + 2, 28 + 5) = 1.0f;  // patch (1, 2), pixel (2, 5)
    const auto t = patch_embed(v, e);
    const std::size_t row = 1 * 24 + 2;
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(t.tokens(row, j) == e.projection(2 * 14 + 5, j));
        CHECK(t.tokens(0, j) == 0.0);
    }
}

TEST_CASE("temporal and positional embeddings") {
    const auto c = small_config();
    const auto params = PerceiverParams<double>::make(c);
    const auto x = random_embeddings(c, 3, 50);
    const auto out = add_temporal_positional(x, params.temporal, params.positional);
    const std::size_t P = c.patches_per_frame();
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t j = 0; j < c.vision_dim; ++j)
                CHECK(std::abs(out(f * P + p, j) - (x.tokens(f * P + p, j) + params.temporal(f, j) +
                                                    params.positional(p, j))) <= 1e-15);

    const Matrix<double> zero_t(c.max_frames, c.vision_dim), zero_p(P, c.vision_dim);
    CHECK(add_temporal_positional(x, zero_t, zero_p) == x.tokens);

    // With no temporal signal, swapping frames swaps token blocks.
    auto swapped = x;
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t j = 0; j < c.vision_dim; ++j) std::swap(swapped.tokens(p, j), swapped.tokens(P + p, j));
    const auto a = add_temporal_positional(x, zero_t, params.positional);
    const auto b = add_temporal_positional(swapped, zero_t, params.positional);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t j = 0; j < c.vision_dim; ++j) CHECK(a(p, j) == b(P + p, j));

    const auto too_many = random_embeddings(c, c.max_frames + 1, 51);
    CHECK_THROWS_AS(add_temporal_positional(too_many, params.temporal, params.positional), ValidationError);
}

TEST_CASE("perceiver forward matches a straight-line oracle") {
    const auto c = small_config();
    const auto params = PerceiverParams<double>::make(c);
    const auto x = random_embeddings(c, 2, 60);
    const auto tokens = add_temporal_positional(x, params.temporal, params.positional);
    Matrix<double> h = params.latents;
    for (const auto& layer : params.layers) {
        const auto attn = dense_attention(h, tokens, layer.attention, c.heads);
        for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += attn.data[i];
        h = gelu_ffn_oracle(h, layer);
    }
    double scale = 1.0;
    for (double v : h.data) scale = std::max(scale, std::abs(v));
    CHECK(max_abs_diff(perceiver_forward(x, params), h) <= 1e-13 * scale);
}

TEST_CASE("streaming and materialized forward are bit-identical") {
    auto c = small_config();
    c.heads = 2;
    const auto x = random_embeddings(c, 3, 70);
    CHECK(perceiver_forward_streaming(x, c) == perceiver_forward(x, PerceiverParams<double>::make(c)));
    VisionEmbeddings<float> xf{3, Matrix<float>(x.tokens.rows, x.tokens.cols)};
    for (std::size_t i = 0; i < x.tokens.data.size(); ++i) xf.tokens.data[i] = static_cast<float>(x.tokens.data[i]);
    CHECK(perceiver_forward_streaming(xf, c) == perceiver_forward(xf, PerceiverParams<float>::make(c)));
}

TEST_CASE("output shape is independent of the frame count") {
    PerceiverConfig c;
    c.width = 32;
    c.vision_dim = 16;
    c.layers = 1;
    const auto params = PerceiverParams<double>::make(c);
    const auto embedder = PatchEmbedder<double>::make(c);
    for (std::uint32_t frames : {1u, 2u, 5u, 30u}) {
        imaging::Volume v({frames, 336, 336}, imaging::Unit::Normalized, 0.25f);
        const auto x = patch_embed(v, embedder);
        CHECK(x.tokens.rows == frames * 576u);
        const auto out = perceiver_forward(x, params);
        CHECK(out.rows == 32);
        CHECK(out.cols == 32);
        for (double val : out.data) CHECK(std::isfinite(val));
    }
}

TEST_CASE("config validation") {
    PerceiverConfig c;
    CHECK_NOTHROW(c.validate());
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = PerceiverConfig{};
    c.image = 330;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("LoRA with a zero up-projection is the base map exactly") {
    LoraAdapter<double> a{random_matrix(80, 6, 6), random_matrix(81, 6, 2), Matrix<double>(6, 2)};
    const auto v = random_matrix(82, 1, 6);
    const auto out = lora_apply(a, v.row(0));
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 6; ++j) s += a.base(i, j) * v(0, j);
        CHECK(out[i] == s);
    }
}

TEST_CASE("rank-1 LoRA by hand") {
    LoraAdapter<double> a{Matrix<double>(3, 3), Matrix<double>(3, 1), Matrix<double>(3, 1)};
    a.down.data = {1, 2, 3};
    a.up.data = {1, 0, -1};
    const std::vector<double> v{4, 5, 6};
    // (up . v) = -2, so the update is -2 * down.
    CHECK(lora_apply(a, std::span<const double>(v)) == std::vector<double>{-2, -4, -6});
    const auto delta = lora_delta(a);
    CHECK(delta(1, 2) == -2.0);
    CHECK(delta(2, 0) == 3.0);
}

TEST_CASE("factored LoRA equals the dense update and has rank at most r") {
    const std::size_t d = 64, r = 4;
    LoraAdapter<double> a{random_matrix(90, d, d), random_matrix(91, d, r), random_matrix(92, d, r)};
    const auto delta = lora_delta(a);
    const auto v = random_matrix(93, 1, d);
    const auto fast = lora_apply(a, v.row(0));
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += (a.base(i, j) + delta(i, j)) * v(0, j);
        CHECK(std::abs(fast[i] - s) <= 1e-10);
    }
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        delta.data.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto s = svd.singularValues();
    CHECK(s(static_cast<Eigen::Index>(r) - 1) > 1e-3);
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < s.size(); ++i) CHECK(s(i) < 1e-8);
}

TEST_CASE("LoRA validation") {
    LoraAdapter<double> a{Matrix<double>(4, 4), Matrix<double>(4, 2), Matrix<double>(3, 2)};
    CHECK_THROWS_AS(a.validate(), ShapeError);
}

TEST_CASE("parameter accounting") {
    const PerceiverConfig c;
    const LoraSpec lora;
    const auto s1 = trainable_parameter_report(c, lora, 1);
    const auto s2 = trainable_parameter_report(c, lora, 2);
    CHECK(s1.lora == 0);
    CHECK(s2.lora == 65536);
    CHECK(s2.lora < 4096LL * 4096LL);
    CHECK(s2.frozen_base == 4096LL * 4096LL);
    CHECK(s1.perceiver == perceiver_parameter_count(c));
    CHECK(s2.trainable() == s1.trainable() + 65536);
    CHECK_THROWS_AS(trainable_parameter_report(c, LoraSpec{4096, 4096, 1}, 2), ValidationError);
}

TEST_CASE("finite-difference gradcheck detects wrong gradients") {
    std::vector<double> x{0.3, -1.2, 2.0};
    auto loss = [&] { return x[0] * x[0] + 3 * x[1] * x[1] * x[1] + std::sin(x[2]); };
    std::vector<ParamBlock> good{{"x", &x, {2 * 0.3, 9 * 1.44, std::cos(2.0)}}};
    CHECK(finite_diff_gradcheck(loss, good, 1e-5, 0, 1).max_rel_error < 1e-8);
    CHECK(x == std::vector<double>{0.3, -1.2, 2.0});
    std::vector<ParamBlock> bad{{"x", &x, {0.6, 12.96, 0.0}}};
    CHECK(finite_diff_gradcheck(loss, bad, 1e-5, 0, 1).max_rel_error > 0.5);
    std::vector<ParamBlock> wrong_size{{"x", &x, {1.0}}};
    CHECK_THROWS_AS(finite_diff_gradcheck(loss, wrong_size, 1e-5, 0, 1), ShapeError);
}

TEST_CASE("built-in gradient checks") {
    CHECK(gradcheck_linear(1, 1e-5).max_rel_error <= 1e-8);
    const auto attn = gradcheck_attention(1, 1e-5);
    CHECK(attn.max_rel_error <= 1e-6);
    CHECK(attn.per_block.size() >= 5);
    CHECK(gradcheck_lora(1, 1e-5).max_rel_error <= 1e-8);
}

TEST_CASE("attention backward agrees with the forward pass on a directional derivative") {
    const auto h = random_matrix(100, 2, 4), x = random_matrix(101, 3, 3);
    const auto w = random_weights(102, 4, 3);
    const auto g = random_matrix(103, 2, 4);
    const auto grads = cross_attention_backward(h, x, w, 1, g);
    const auto dir = random_matrix(104, 3, 3);
    auto f = [&](double t) {
        auto xt = x;
        for (std::size_t i = 0; i < xt.data.size(); ++i) xt.data[i] += t * dir.data[i];
        const auto o = cross_attention(h, xt, w, 1).output;
        double s = 0;
        for (std::size_t i = 0; i < o.data.size(); ++i) s += o.data[i] * g.data[i];
        return s;
    };
    const double numeric = (f(1e-6) - f(-1e-6)) / 2e-6;
    double analytic = 0;
    for (std::size_t i = 0; i < dir.data.size(); ++i) analytic += grads.d_tokens.data[i] * dir.data[i];
    CHECK(std::abs(numeric - analytic) <= 1e-7 * std::max(1.0, std::abs(analytic)));
}

TEST_CASE("saved parameters are P2TN files") {
    testing_support::TempDir dir("params");
    auto c = small_config();
    c.layers = 1;
    const auto p = PerceiverParams<float>::make(c);
    save_params(p, dir.path());
    const auto latents = imaging::read_tensor(dir / "latents.p2tn");
    CHECK(latents.dims == std::vector<std::uint32_t>{4, 16});
    CHECK(latents.values == p.latents.data);
    CHECK(std::filesystem::exists(dir / "layer0_ffn_out_bias.p2tn"));
}
