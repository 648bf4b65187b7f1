#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "medcorpus/imaging.hpp"

namespace medcorpus::perceiver {

/// Dense row-major matrix. Instantiated for float and double.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    T operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

/// A B
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);
/// A B^T
template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b);
/// A^T B
template <typename T>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

// ---------------------------------------------------------------------------

struct PerceiverConfig {
    std::size_t latents = 32;
    std::size_t width = 4096;
    std::size_t vision_dim = 1024;
    std::size_t layers = 6;
    std::size_t max_frames = 64;
    std::size_t heads = 1;
    std::size_t ffn_mult = 2;
    std::size_t patch = 14;
    std::size_t image = 336;
    std::uint64_t seed = 1;

    std::size_t patches_per_frame() const { return (image / patch) * (image / patch); }
    std::size_t head_dim() const { return width / heads; }
    std::size_t ffn_hidden() const { return width * ffn_mult; }
    void validate() const;
};

/// Entries are a pure function of (key, row, col): scale * u with
/// u = counter_uniform(key, row * cols + col) in [-1, 1). Rows can be
/// produced on demand without materializing the matrix.
struct ProceduralMatrix {
    std::uint64_t key = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    double scale = 1.0;

    template <typename T>
    void fill_row(std::size_t r, std::span<T> out) const;
    template <typename T>
    Matrix<T> materialize() const;
};

template <typename T>
struct VisionEmbeddings {
    std::size_t frames = 0;
    /// frames * patches_per_frame rows, frame-major.
    Matrix<T> tokens;
};

template <typename T>
struct PatchEmbedder {
    std::size_t patch = 14;
    std::size_t image = 336;
    /// (patch * patch) x vision_dim.
    Matrix<T> projection;
    std::vector<T> bias;

    static PatchEmbedder make(const PerceiverConfig& config);
};

template <typename T>
VisionEmbeddings<T> patch_embed(const imaging::Volume& volume, const PatchEmbedder<T>& embedder);

template <typename T>
struct AttentionWeights {
    /// width x width
    Matrix<T> query;
    /// width x vision_dim
    Matrix<T> key;
    /// width x vision_dim
    Matrix<T> value;
};

template <typename T>
struct AttentionOutput {
    Matrix<T> output;
    /// One latents x tokens matrix of softmax weights per head.
    std::vector<Matrix<T>> weights;
};

/// softmax((h Wq^T)(x Wk^T)^T / sqrt(head_dim)) (x Wv^T), evaluated as
/// ((h Wq^T) Wk) x^T for the scores and (P x) Wv^T for the values so the
/// keys and values are never formed explicitly. Throws ShapeError on
/// dimension mismatch and ValidationError on non-finite input.
template <typename T>
AttentionOutput<T> cross_attention(const Matrix<T>& latents, const Matrix<T>& tokens,
                                   const AttentionWeights<T>& weights, std::size_t heads = 1);

template <typename T>
struct AttentionGrads {
    Matrix<T> d_latents;
    Matrix<T> d_tokens;
    Matrix<T> d_query;
    Matrix<T> d_key;
    Matrix<T> d_value;
};

/// Gradients of sum(d_output .* output) with respect to every input.
template <typename T>
AttentionGrads<T> cross_attention_backward(const Matrix<T>& latents, const Matrix<T>& tokens,
                                           const AttentionWeights<T>& weights, std::size_t heads,
                                           const Matrix<T>& d_output);

template <typename T>
struct LayerParams {
    AttentionWeights<T> attention;
    /// hidden x width
    Matrix<T> ffn_in;
    std::vector<T> ffn_in_bias;
    /// width x hidden
    Matrix<T> ffn_out;
    std::vector<T> ffn_out_bias;
};

template <typename T>
struct PerceiverParams {
    PerceiverConfig config;
    Matrix<T> latents;
    /// max_frames x vision_dim
    Matrix<T> temporal;
    /// patches_per_frame x vision_dim
    Matrix<T> positional;
    std::vector<LayerParams<T>> layers;

    static PerceiverParams make(const PerceiverConfig& config);
};

/// out[f * P + p] = x[f, p] + temporal[f] + positional[p]. Throws
/// ValidationError when the frame count exceeds the temporal table.
template <typename T>
Matrix<T> add_temporal_positional(const VisionEmbeddings<T>& x, const Matrix<T>& temporal,
                                  const Matrix<T>& positional);

/// Latents after all layers: latents x width, whatever the frame count.
template <typename T>
Matrix<T> perceiver_forward(const VisionEmbeddings<T>& x, const PerceiverParams<T>& params);

/// Same result as perceiver_forward with PerceiverParams::make(config), but
/// large weight matrices are generated row by row and never stored.
template <typename T>
Matrix<T> perceiver_forward_streaming(const VisionEmbeddings<T>& x, const PerceiverConfig& config);

/// Writes each parameter as a P2TN file under `dir`.
void save_params(const PerceiverParams<float>& params, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

template <typename T>
struct LoraAdapter {
    /// d x d base map
    Matrix<T> base;
    /// d x r
    Matrix<T> down;
    /// d x r
    Matrix<T> up;

    std::size_t rank() const { return down.cols; }
    void validate() const;
};

/// base v + down (up^T v), without forming down up^T.
template <typename T>
std::vector<T> lora_apply(const LoraAdapter<T>& adapter, std::span<const T> v);

/// down up^T, for tests and diagnostics.
template <typename T>
Matrix<T> lora_delta(const LoraAdapter<T>& adapter);

template <typename T>
struct LoraGrads {
    Matrix<T> d_down;
    Matrix<T> d_up;
    std::vector<T> d_input;
};

template <typename T>
LoraGrads<T> lora_backward(const LoraAdapter<T>& adapter, std::span<const T> v, std::span<const T> d_output);

// ---------------------------------------------------------------------------

struct LoraSpec {
    std::size_t dim = 4096;
    std::size_t rank = 8;
    std::size_t adapted_matrices = 1;
};

struct ParameterReport {
    int stage = 1;
    std::int64_t perceiver = 0;
    std::int64_t lora = 0;
    std::int64_t frozen_vision = 0;
    std::int64_t frozen_base = 0;

    std::int64_t trainable() const { return perceiver + lora; }
    std::int64_t frozen() const { return frozen_vision + frozen_base; }
};

std::int64_t perceiver_parameter_count(const PerceiverConfig& config);

/// Stage 1 trains the perceiver only; stages 2 and 3 add the adapters.
ParameterReport trainable_parameter_report(const PerceiverConfig& config, const LoraSpec& lora, int stage);

// ---------------------------------------------------------------------------

struct ParamBlock {
    std::string name;
    std::vector<double>* values = nullptr;
    std::vector<double> analytic;
};

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::map<std::string, double> per_block;
    std::size_t probes = 0;
};

/// Compares analytic gradients with central differences on `probes`
/// randomly chosen coordinates per block (0 probes every coordinate).
/// Relative error is |a - n| / max(|a|, |n|, floor). Throws ValidationError
/// on a non-finite loss or gradient.
GradcheckResult finite_diff_gradcheck(const std::function<double()>& loss, std::vector<ParamBlock>& blocks,
                                      double eps, std::size_t probes, std::uint64_t seed, double floor = 1e-6);

/// Built-in checks on small double-precision instances.
GradcheckResult gradcheck_linear(std::uint64_t seed, double eps);
GradcheckResult gradcheck_attention(std::uint64_t seed, double eps);
GradcheckResult gradcheck_lora(std::uint64_t seed, double eps);

}  // namespace medcorpus::perceiver
