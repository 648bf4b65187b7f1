#include "medcorpus/perceiver.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace medcorpus::perceiver {

namespace {

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
    for (T v : m.data) {
        if (!std::isfinite(v)) throw ValidationError(std::string(what) + " contains a non-finite value");
    }
}

/// Runs fn(begin, end) over [0, n) on up to hardware_concurrency threads
/// when the total work is large enough to pay for them.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
    const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t threads = n * work_per_item < (std::size_t{1} << 22) ? 1 : std::min(hw, n);
    if (threads <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    std::vector<std::jthread> pool;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        pool.emplace_back([&fn, begin, end = std::min(n, begin + chunk)] { fn(begin, end); });
    }
}

/// Uniform row access over stored and procedural weights.
template <typename T>
struct StoredRows {
    const Matrix<T>& m;
    std::size_t rows() const { return m.rows; }
    std::size_t cols() const { return m.cols; }
    std::span<const T> read(std::size_t r, std::vector<T>&) const { return m.row(r); }
};

template <typename T>
struct GeneratedRows {
    const ProceduralMatrix& p;
    std::size_t rows() const { return p.rows; }
    std::size_t cols() const { return p.cols; }
    std::span<const T> read(std::size_t r, std::vector<T>& buffer) const {
        buffer.resize(p.cols);
        p.fill_row<T>(r, std::span<T>(buffer));
        return buffer;
    }
};

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// out(l, o) = in.row(l) . W.row(o) + bias[o] for o in [first, last).
template <typename T, typename Rows>
void project_into(const Matrix<T>& in, const Rows& weights, std::size_t first, std::size_t last, const T* bias,
                  Matrix<T>& out, std::size_t out_col0) {
    parallel_for(last - first, in.rows * weights.cols(), [&](std::size_t b, std::size_t e) {
        std::vector<T> buffer;
        for (std::size_t o = first + b; o < first + e; ++o) {
            const auto w = weights.read(o, buffer);
            const T add = bias ? bias[o] : T(0);
            for (std::size_t l = 0; l < in.rows; ++l) out(l, out_col0 + o - first) = dot<T>(in.row(l), w) + add;
        }
    });
}

template <typename T, typename Rows>
Matrix<T> project(const Matrix<T>& in, const Rows& weights, const std::vector<T>* bias) {
    if (in.cols != weights.cols()) throw ShapeError("project: input width does not match weight columns");
    Matrix<T> out(in.rows, weights.rows());
    project_into(in, weights, 0, weights.rows(), bias ? bias->data() : nullptr, out, 0);
    return out;
}

template <typename T>
void softmax_rows(Matrix<T>& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        const T top = *std::max_element(row.begin(), row.end());
        T sum = 0;
        for (T& v : row) {
            v = std::exp(v - top);
            sum += v;
        }
        for (T& v : row) v /= sum;
    }
}

template <typename T, typename Rows>
AttentionOutput<T> attention_core(const Matrix<T>& latents, const Matrix<T>& tokens, const Rows& query,
                                  const Rows& key, const Rows& value, std::size_t heads) {
    const std::size_t width = latents.cols;
    if (heads == 0 || width % heads != 0) throw ShapeError("cross_attention: heads must divide the latent width");
    if (query.rows() != width || query.cols() != width) throw ShapeError("cross_attention: query weights must be width x width");
    if (key.rows() != width || value.rows() != width) throw ShapeError("cross_attention: key/value weights must have width rows");
    if (key.cols() != tokens.cols || value.cols() != tokens.cols) {
        throw ShapeError("cross_attention: key/value weights must match the token dimension");
    }
    if (tokens.rows == 0) throw ShapeError("cross_attention: no input tokens");
    require_finite(latents, "cross_attention latents");
    require_finite(tokens, "cross_attention tokens");

    const std::size_t head_dim = width / heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const Matrix<T> q = project(latents, query, static_cast<const std::vector<T>*>(nullptr));

    AttentionOutput<T> out;
    out.output = Matrix<T>(latents.rows, width);
    std::vector<T> buffer;
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * head_dim;
        // Query mapped into token space: sum over this head's rows of Wk.
        Matrix<T> qk(latents.rows, tokens.cols);
        for (std::size_t o = c0; o < c0 + head_dim; ++o) {
            const auto w = key.read(o, buffer);
            for (std::size_t l = 0; l < latents.rows; ++l) {
                const T coeff = q(l, o);
                auto dst = qk.row(l);
                for (std::size_t j = 0; j < tokens.cols; ++j) dst[j] += coeff * w[j];
            }
        }
        Matrix<T> scores = matmul_bt(qk, tokens);
        for (T& s : scores.data) s *= inv_scale;
        softmax_rows(scores);
        const Matrix<T> pooled = matmul(scores, tokens);
        project_into(pooled, value, c0, c0 + head_dim, static_cast<const T*>(nullptr), out.output, c0);
        out.weights.push_back(std::move(scores));
    }
    return out;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

/// Weight descriptors shared by the stored and streaming paths.
struct LayerPlan {
    ProceduralMatrix query, key, value, ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
};

ProceduralMatrix procedural(const PerceiverConfig& c, const std::string& tag, std::size_t rows, std::size_t cols,
                            double scale) {
    return {derive_seed(c.seed, "perceiver/" + tag), rows, cols, scale};
}

double fan_in_scale(std::size_t fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); }

LayerPlan layer_plan(const PerceiverConfig& c, std::size_t layer) {
    const std::string p = "layer" + std::to_string(layer) + "/";
    const std::size_t d = c.width, dv = c.vision_dim, hid = c.ffn_hidden();
    return {procedural(c, p + "query", d, d, fan_in_scale(d)),
            procedural(c, p + "key", d, dv, fan_in_scale(dv)),
            procedural(c, p + "value", d, dv, fan_in_scale(dv)),
            procedural(c, p + "ffn_in", hid, d, fan_in_scale(d)),
            procedural(c, p + "ffn_in_bias", 1, hid, 0.01),
            procedural(c, p + "ffn_out", d, hid, fan_in_scale(hid)),
            procedural(c, p + "ffn_out_bias", 1, d, 0.01)};
}

ProceduralMatrix latents_plan(const PerceiverConfig& c) { return procedural(c, "latents", c.latents, c.width, 1.0); }
ProceduralMatrix temporal_plan(const PerceiverConfig& c) {
    return procedural(c, "temporal", c.max_frames, c.vision_dim, 0.02);
}
ProceduralMatrix positional_plan(const PerceiverConfig& c) {
    return procedural(c, "positional", c.patches_per_frame(), c.vision_dim, 0.02);
}

template <typename T>
std::vector<T> row_vector(const ProceduralMatrix& p) {
    std::vector<T> v(p.cols);
    p.fill_row<T>(0, std::span<T>(v));
    return v;
}

template <typename T, typename Rows>
void layer_forward(Matrix<T>& h, const Matrix<T>& tokens, const Rows& query, const Rows& key, const Rows& value,
                   const Rows& ffn_in, const std::vector<T>& ffn_in_bias, const Rows& ffn_out,
                   const std::vector<T>& ffn_out_bias, std::size_t heads) {
    const auto attn = attention_core(h, tokens, query, key, value, heads);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += attn.output.data[i];
    Matrix<T> hidden = project(h, ffn_in, &ffn_in_bias);
    for (T& v : hidden.data) v = gelu(v);
    const Matrix<T> ff = project(hidden, ffn_out, &ffn_out_bias);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += ff.data[i];
}

template <typename T>
void write_matrix(const std::filesystem::path& path, const Matrix<T>& m) {
    imaging::Tensor t;
    t.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
    t.values.assign(m.data.begin(), m.data.end());
    imaging::write_tensor(path, t);
}

Matrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix<double> m(r, c);
    for (double& v : m.data) v = rng.normal() * 0.5;
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
    Matrix<T> out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T aik = a(i, k);
            const auto src = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.cols) throw ShapeError("matmul_bt: inner dimensions differ");
    Matrix<T> out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.rows; ++j) out(i, j) = dot<T>(a.row(i), b.row(j));
    }
    return out;
}

template <typename T>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<T>& b) {
    return matmul(transpose(a), b);
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    }
    return out;
}

void PerceiverConfig::validate() const {
    if (latents == 0 || width == 0 || vision_dim == 0 || layers == 0 || max_frames == 0 || ffn_mult == 0) {
        throw ValidationError("perceiver config: sizes must be positive");
    }
    if (heads == 0 || width % heads != 0) throw ValidationError("perceiver config: heads must divide width");
    if (patch == 0 || image % patch != 0) throw ValidationError("perceiver config: patch must divide image size");
}

template <typename T>
void ProceduralMatrix::fill_row(std::size_t r, std::span<T> out) const {
    const std::uint64_t base = static_cast<std::uint64_t>(r) * cols;
    for (std::size_t c = 0; c < cols; ++c) {
        out[c] = static_cast<T>(scale * counter_uniform(key, base + c));
    }
}

template <typename T>
Matrix<T> ProceduralMatrix::materialize() const {
    Matrix<T> m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) fill_row<T>(r, m.row(r));
    return m;
}

template <typename T>
PatchEmbedder<T> PatchEmbedder<T>::make(const PerceiverConfig& c) {
    c.validate();
    PatchEmbedder e;
    e.patch = c.patch;
    e.image = c.image;
    e.projection = procedural(c, "patch_projection", c.patch * c.patch, c.vision_dim,
                              fan_in_scale(c.patch * c.patch))
                       .materialize<T>();
    e.bias.assign(c.vision_dim, T(0));
    return e;
}

template <typename T>
VisionEmbeddings<T> patch_embed(const imaging::Volume& volume, const PatchEmbedder<T>& e) {
    if (volume.dims.y != e.image || volume.dims.x != e.image) {
        throw ShapeError("patch_embed: expected " + std::to_string(e.image) + "x" + std::to_string(e.image) +
                         " frames, got " + std::to_string(volume.dims.y) + "x" + std::to_string(volume.dims.x));
    }
    if (volume.dims.z == 0) throw ShapeError("patch_embed: volume has no frames");
    const std::size_t grid = e.image / e.patch;
    const std::size_t per_frame = grid * grid;
    const std::size_t dim = e.projection.cols;
    if (e.projection.rows != e.patch * e.patch || e.bias.size() != dim) {
        throw ShapeError("patch_embed: projection must be (patch*patch) x dim");
    }
    VisionEmbeddings<T> out;
    out.frames = volume.dims.z;
    out.tokens = Matrix<T>(out.frames * per_frame, dim);
    parallel_for(out.frames * per_frame, e.projection.rows * dim, [&](std::size_t b, std::size_t end) {
        std::vector<T> pixels(e.patch * e.patch);
        for (std::size_t t = b; t < end; ++t) {
            const std::size_t f = t / per_frame, p = t % per_frame;
            const std::size_t py = p / grid, px = p % grid;
            for (std::size_t dy = 0; dy < e.patch; ++dy) {
                for (std::size_t dx = 0; dx < e.patch; ++dx) {
                    pixels[dy * e.patch + dx] = static_cast<T>(volume.at(f, py * e.patch + dy, px * e.patch + dx));
                }
            }
            auto dst = out.tokens.row(t);
            std::copy(e.bias.begin(), e.bias.end(), dst.begin());
            for (std::size_t k = 0; k < pixels.size(); ++k) {
                const auto src = e.projection.row(k);
                for (std::size_t j = 0; j < dim; ++j) dst[j] += pixels[k] * src[j];
            }
        }
    });
    return out;
}

template <typename T>
AttentionOutput<T> cross_attention(const Matrix<T>& latents, const Matrix<T>& tokens, const AttentionWeights<T>& w,
                                   std::size_t heads) {
    return attention_core(latents, tokens, StoredRows<T>{w.query}, StoredRows<T>{w.key}, StoredRows<T>{w.value},
                          heads);
}

template <typename T>
AttentionGrads<T> cross_attention_backward(const Matrix<T>& h, const Matrix<T>& x, const AttentionWeights<T>& w,
                                           std::size_t heads, const Matrix<T>& d_out) {
    const std::size_t width = h.cols;
    if (heads == 0 || width % heads != 0) throw ShapeError("cross_attention_backward: heads must divide width");
    if (d_out.rows != h.rows || d_out.cols != width) throw ShapeError("cross_attention_backward: d_output shape");
    const std::size_t hd = width / heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
    const Matrix<T> q = matmul_bt(h, w.query);
    const Matrix<T> k = matmul_bt(x, w.key);
    const Matrix<T> v = matmul_bt(x, w.value);

    Matrix<T> dq(h.rows, width), dk(x.rows, width), dv(x.rows, width);
    for (std::size_t head = 0; head < heads; ++head) {
        const std::size_t c0 = head * hd;
        Matrix<T> p(h.rows, x.rows);
        for (std::size_t l = 0; l < h.rows; ++l) {
            for (std::size_t n = 0; n < x.rows; ++n) {
                T s = 0;
                for (std::size_t c = c0; c < c0 + hd; ++c) s += q(l, c) * k(n, c);
                p(l, n) = s * inv_scale;
            }
        }
        softmax_rows(p);
        for (std::size_t l = 0; l < h.rows; ++l) {
            std::vector<T> dp(x.rows);
            T weighted = 0;
            for (std::size_t n = 0; n < x.rows; ++n) {
                T s = 0;
                for (std::size_t c = c0; c < c0 + hd; ++c) s += d_out(l, c) * v(n, c);
                dp[n] = s;
                weighted += s * p(l, n);
            }
            for (std::size_t n = 0; n < x.rows; ++n) {
                const T ds = p(l, n) * (dp[n] - weighted) * inv_scale;
                for (std::size_t c = c0; c < c0 + hd; ++c) {
                    dq(l, c) += ds * k(n, c);
                    dk(n, c) += ds * q(l, c);
                    dv(n, c) += p(l, n) * d_out(l, c);
                }
            }
        }
    }
    AttentionGrads<T> g;
    g.d_query = matmul_at(dq, h);
    g.d_key = matmul_at(dk, x);
    g.d_value = matmul_at(dv, x);
    g.d_latents = matmul(dq, w.query);
    g.d_tokens = matmul(dk, w.key);
    const Matrix<T> from_v = matmul(dv, w.value);
    for (std::size_t i = 0; i < g.d_tokens.data.size(); ++i) g.d_tokens.data[i] += from_v.data[i];
    return g;
}

template <typename T>
PerceiverParams<T> PerceiverParams<T>::make(const PerceiverConfig& c) {
    c.validate();
    PerceiverParams p;
    p.config = c;
    p.latents = latents_plan(c).materialize<T>();
    p.temporal = temporal_plan(c).materialize<T>();
    p.positional = positional_plan(c).materialize<T>();
    for (std::size_t l = 0; l < c.layers; ++l) {
        const LayerPlan plan = layer_plan(c, l);
        p.layers.push_back({{plan.query.materialize<T>(), plan.key.materialize<T>(), plan.value.materialize<T>()},
                            plan.ffn_in.materialize<T>(),
                            row_vector<T>(plan.ffn_in_bias),
                            plan.ffn_out.materialize<T>(),
                            row_vector<T>(plan.ffn_out_bias)});
    }
    return p;
}

template <typename T>
Matrix<T> add_temporal_positional(const VisionEmbeddings<T>& x, const Matrix<T>& temporal,
                                  const Matrix<T>& positional) {
    if (x.frames == 0) throw ShapeError("add_temporal_positional: no frames");
    if (x.frames > temporal.rows) {
        throw ValidationError("add_temporal_positional: " + std::to_string(x.frames) +
                              " frames exceed the temporal table (" + std::to_string(temporal.rows) + ")");
    }
    const std::size_t per_frame = positional.rows;
    if (x.tokens.rows != x.frames * per_frame || x.tokens.cols != positional.cols ||
        temporal.cols != positional.cols) {
        throw ShapeError("add_temporal_positional: embedding shapes disagree");
    }
    Matrix<T> out = x.tokens;
    for (std::size_t f = 0; f < x.frames; ++f) {
        const auto t = temporal.row(f);
        for (std::size_t p = 0; p < per_frame; ++p) {
            auto dst = out.row(f * per_frame + p);
            const auto pos = positional.row(p);
            for (std::size_t j = 0; j < out.cols; ++j) dst[j] += t[j] + pos[j];
        }
    }
    return out;
}

template <typename T>
Matrix<T> perceiver_forward(const VisionEmbeddings<T>& x, const PerceiverParams<T>& params) {
    const Matrix<T> tokens = add_temporal_positional(x, params.temporal, params.positional);
    Matrix<T> h = params.latents;
    for (const auto& layer : params.layers) {
        layer_forward(h, tokens, StoredRows<T>{layer.attention.query}, StoredRows<T>{layer.attention.key},
                      StoredRows<T>{layer.attention.value}, StoredRows<T>{layer.ffn_in}, layer.ffn_in_bias,
                      StoredRows<T>{layer.ffn_out}, layer.ffn_out_bias, params.config.heads);
    }
    return h;
}

template <typename T>
Matrix<T> perceiver_forward_streaming(const VisionEmbeddings<T>& x, const PerceiverConfig& c) {
    c.validate();
    const Matrix<T> tokens = add_temporal_positional(x, temporal_plan(c).materialize<T>(),
                                                     positional_plan(c).materialize<T>());
    Matrix<T> h = latents_plan(c).materialize<T>();
    for (std::size_t l = 0; l < c.layers; ++l) {
        const LayerPlan plan = layer_plan(c, l);
        layer_forward(h, tokens, GeneratedRows<T>{plan.query}, GeneratedRows<T>{plan.key},
                      GeneratedRows<T>{plan.value}, GeneratedRows<T>{plan.ffn_in}, row_vector<T>(plan.ffn_in_bias),
                      GeneratedRows<T>{plan.ffn_out}, row_vector<T>(plan.ffn_out_bias), c.heads);
    }
    return h;
}

void save_params(const PerceiverParams<float>& p, const std::filesystem::path& dir) {
    write_matrix(dir / "latents.p2tn", p.latents);
    write_matrix(dir / "temporal.p2tn", p.temporal);
    write_matrix(dir / "positional.p2tn", p.positional);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + "_";
        write_matrix(dir / (prefix + "query.p2tn"), layer.attention.query);
        write_matrix(dir / (prefix + "key.p2tn"), layer.attention.key);
        write_matrix(dir / (prefix + "value.p2tn"), layer.attention.value);
        write_matrix(dir / (prefix + "ffn_in.p2tn"), layer.ffn_in);
        write_matrix(dir / (prefix + "ffn_out.p2tn"), layer.ffn_out);
        Matrix<float> b1(1, layer.ffn_in_bias.size()), b2(1, layer.ffn_out_bias.size());
        b1.data = layer.ffn_in_bias;
        b2.data = layer.ffn_out_bias;
        write_matrix(dir / (prefix + "ffn_in_bias.p2tn"), b1);
        write_matrix(dir / (prefix + "ffn_out_bias.p2tn"), b2);
    }
}

// ---------------------------------------------------------------------------

template <typename T>
void LoraAdapter<T>::validate() const {
    const std::size_t d = base.rows;
    if (base.cols != d) throw ShapeError("lora: base map must be square");
    if (down.rows != d || up.rows != d || down.cols != up.cols) throw ShapeError("lora: factors must both be d x r");
    if (down.cols < 1 || down.cols >= d) throw ShapeError("lora: rank must satisfy 1 <= r < d");
}

template <typename T>
std::vector<T> lora_apply(const LoraAdapter<T>& a, std::span<const T> v) {
    a.validate();
    if (v.size() != a.base.cols) throw ShapeError("lora_apply: input length does not match d");
    const std::size_t d = a.base.rows, r = a.rank();
    std::vector<T> t(r, T(0));
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < r; ++k) t[k] += a.up(j, k) * v[j];
    }
    std::vector<T> out(d);
    for (std::size_t i = 0; i < d; ++i) {
        T s = dot<T>(a.base.row(i), v);
        for (std::size_t k = 0; k < r; ++k) s += a.down(i, k) * t[k];
        out[i] = s;
    }
    return out;
}

template <typename T>
Matrix<T> lora_delta(const LoraAdapter<T>& a) {
    a.validate();
    return matmul_bt(a.down, a.up);
}

template <typename T>
LoraGrads<T> lora_backward(const LoraAdapter<T>& a, std::span<const T> v, std::span<const T> g) {
    a.validate();
    const std::size_t d = a.base.rows, r = a.rank();
    if (v.size() != d || g.size() != d) throw ShapeError("lora_backward: vector lengths must equal d");
    std::vector<T> t(r, T(0)), s(r, T(0));
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < r; ++k) {
            t[k] += a.up(j, k) * v[j];
            s[k] += a.down(j, k) * g[j];
        }
    }
    LoraGrads<T> out{Matrix<T>(d, r), Matrix<T>(d, r), std::vector<T>(d, T(0))};
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t k = 0; k < r; ++k) {
            out.d_down(i, k) = g[i] * t[k];
            out.d_up(i, k) = v[i] * s[k];
        }
        T acc = 0;
        for (std::size_t o = 0; o < d; ++o) acc += a.base(o, i) * g[o];
        for (std::size_t k = 0; k < r; ++k) acc += a.up(i, k) * s[k];
        out.d_input[i] = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------

std::int64_t perceiver_parameter_count(const PerceiverConfig& c) {
    const auto d = static_cast<std::int64_t>(c.width);
    const auto dv = static_cast<std::int64_t>(c.vision_dim);
    const auto hid = static_cast<std::int64_t>(c.ffn_hidden());
    const std::int64_t per_layer = d * d + 2 * d * dv + hid * d + hid + d * hid + d;
    return static_cast<std::int64_t>(c.latents) * d + static_cast<std::int64_t>(c.max_frames) * dv +
           static_cast<std::int64_t>(c.patches_per_frame()) * dv + static_cast<std::int64_t>(c.layers) * per_layer;
}

ParameterReport trainable_parameter_report(const PerceiverConfig& c, const LoraSpec& lora, int stage) {
    if (stage < 1 || stage > 3) throw ValidationError("parameter report: stage must be 1, 2 or 3");
    if (lora.rank < 1 || lora.rank >= lora.dim) throw ValidationError("parameter report: rank must satisfy 1 <= r < d");
    ParameterReport r;
    r.stage = stage;
    r.perceiver = perceiver_parameter_count(c);
    const auto patch_area = static_cast<std::int64_t>(c.patch * c.patch);
    r.frozen_vision = patch_area * static_cast<std::int64_t>(c.vision_dim) + static_cast<std::int64_t>(c.vision_dim);
    const auto d = static_cast<std::int64_t>(lora.dim);
    const auto m = static_cast<std::int64_t>(lora.adapted_matrices);
    r.frozen_base = d * d * m;
    r.lora = stage == 1 ? 0 : 2 * d * static_cast<std::int64_t>(lora.rank) * m;
    return r;
}

// ---------------------------------------------------------------------------

GradcheckResult finite_diff_gradcheck(const std::function<double()>& loss, std::vector<ParamBlock>& blocks,
                                      double eps, std::size_t probes, std::uint64_t seed, double floor) {
    if (!(eps > 0)) throw ValidationError("gradcheck: eps must be positive");
    GradcheckResult result;
    for (auto& block : blocks) {
        auto& values = *block.values;
        if (block.analytic.size() != values.size()) {
            throw ShapeError("gradcheck: analytic gradient size differs for block " + block.name);
        }
        std::vector<std::size_t> coords(values.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (probes != 0 && probes < coords.size()) {
            Rng rng(derive_seed(seed, "gradcheck/" + block.name));
            rng.shuffle(coords);
            coords.resize(probes);
            std::sort(coords.begin(), coords.end());
        }
        double worst = 0.0;
        for (std::size_t i : coords) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = loss();
            values[i] = saved - eps;
            const double down = loss();
            values[i] = saved;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = block.analytic[i];
            if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
                throw ValidationError("gradcheck: non-finite gradient in block " + block.name);
            }
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
            ++result.probes;
        }
        result.per_block[block.name] = worst;
        result.max_rel_error = std::max(result.max_rel_error, worst);
    }
    return result;
}

GradcheckResult gradcheck_linear(std::uint64_t seed, double eps) {
    Rng rng(derive_seed(seed, "gradcheck-linear"));
    Matrix<double> w = random_matrix(rng, 5, 4);
    Matrix<double> v = random_matrix(rng, 1, 4);
    auto loss = [&] {
        double s = 0;
        for (std::size_t i = 0; i < w.rows; ++i) s += dot<double>(w.row(i), v.row(0));
        return s;
    };
    std::vector<ParamBlock> blocks{{"weight", &w.data, {}}, {"input", &v.data, std::vector<double>(4, 0.0)}};
    for (std::size_t i = 0; i < w.rows; ++i) {
        for (std::size_t j = 0; j < w.cols; ++j) {
            blocks[0].analytic.push_back(v(0, j));
            blocks[1].analytic[j] += w(i, j);
        }
    }
    return finite_diff_gradcheck(loss, blocks, eps, 0, seed);
}

GradcheckResult gradcheck_attention(std::uint64_t seed, double eps) {
    Rng rng(derive_seed(seed, "gradcheck-attention"));
    const std::size_t latents = 2, tokens = 3, width = 4, dim = 4;
    Matrix<double> h = random_matrix(rng, latents, width);
    Matrix<double> x = random_matrix(rng, tokens, dim);
    AttentionWeights<double> w{random_matrix(rng, width, width), random_matrix(rng, width, dim),
                               random_matrix(rng, width, dim)};
    auto loss = [&] {
        const auto out = cross_attention(h, x, w, 1);
        double s = 0;
        for (double v : out.output.data) s += v;
        return s;
    };
    const auto g = cross_attention_backward(h, x, w, 1, Matrix<double>(latents, width, 1.0));
    std::vector<ParamBlock> blocks{{"latents", &h.data, g.d_latents.data},
                                   {"tokens", &x.data, g.d_tokens.data},
                                   {"query", &w.query.data, g.d_query.data},
                                   {"key", &w.key.data, g.d_key.data},
                                   {"value", &w.value.data, g.d_value.data}};
    return finite_diff_gradcheck(loss, blocks, eps, 0, seed);
}

GradcheckResult gradcheck_lora(std::uint64_t seed, double eps) {
    Rng rng(derive_seed(seed, "gradcheck-lora"));
    const std::size_t d = 8, r = 2;
    LoraAdapter<double> a{random_matrix(rng, d, d), random_matrix(rng, d, r), random_matrix(rng, d, r)};
    std::vector<double> v = random_matrix(rng, 1, d).data;
    auto loss = [&] {
        double s = 0;
        for (double y : lora_apply<double>(a, v)) s += y;
        return s;
    };
    const std::vector<double> ones(d, 1.0);
    const auto g = lora_backward<double>(a, v, ones);
    std::vector<ParamBlock> blocks{
        {"down", &a.down.data, g.d_down.data}, {"up", &a.up.data, g.d_up.data}, {"input", &v, g.d_input}};
    return finite_diff_gradcheck(loss, blocks, eps, 0, seed);
}

// ---------------------------------------------------------------------------

#define MEDCORPUS_PERCEIVER_INSTANTIATE(T)                                                                         \
    template struct Matrix<T>;                                                                                     \
    template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                                                 \
    template Matrix<T> matmul_bt(const Matrix<T>&, const Matrix<T>&);                                              \
    template Matrix<T> matmul_at(const Matrix<T>&, const Matrix<T>&);                                              \
    template Matrix<T> transpose(const Matrix<T>&);                                                                \
    template void ProceduralMatrix::fill_row<T>(std::size_t, std::span<T>) const;                                  \
    template Matrix<T> ProceduralMatrix::materialize<T>() const;                                                   \
    template struct PatchEmbedder<T>;                                                                              \
    template VisionEmbeddings<T> patch_embed(const imaging::Volume&, const PatchEmbedder<T>&);                     \
    template AttentionOutput<T> cross_attention(const Matrix<T>&, const Matrix<T>&, const AttentionWeights<T>&,    \
                                                std::size_t);                                                      \
    template AttentionGrads<T> cross_attention_backward(const Matrix<T>&, const Matrix<T>&,                        \
                                                        const AttentionWeights<T>&, std::size_t, const Matrix<T>&); \
    template struct PerceiverParams<T>;                                                                            \
    template Matrix<T> add_temporal_positional(const VisionEmbeddings<T>&, const Matrix<T>&, const Matrix<T>&);    \
    template Matrix<T> perceiver_forward(const VisionEmbeddings<T>&, const PerceiverParams<T>&);                   \
    template Matrix<T> perceiver_forward_streaming(const VisionEmbeddings<T>&, const PerceiverConfig&);            \
    template struct LoraAdapter<T>;                                                                                \
    template std::vector<T> lora_apply(const LoraAdapter<T>&, std::span<const T>);                                 \
    template Matrix<T> lora_delta(const LoraAdapter<T>&);                                                          \
    template LoraGrads<T> lora_backward(const LoraAdapter<T>&, std::span<const T>, std::span<const T>);

MEDCORPUS_PERCEIVER_INSTANTIATE(float)
MEDCORPUS_PERCEIVER_INSTANTIATE(double)

#undef MEDCORPUS_PERCEIVER_INSTANTIATE

}  // namespace medcorpus::perceiver
