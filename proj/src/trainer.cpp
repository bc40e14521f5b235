#include "specee/trainer.hpp"

#include "specee/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace specee {

namespace {

constexpr float kNormEps = 1e-5f;

// Row-major helpers. Shapes: A is rows x inner, W is inner x cols.
void matmul(const float* a, const float* w, float* c, std::size_t rows, std::size_t inner, std::size_t cols)
{
    std::fill(c, c + rows * cols, 0.0f);
    for (std::size_t r = 0; r < rows; ++r) {
        float* cr = c + r * cols;
        for (std::size_t k = 0; k < inner; ++k) {
            const float x = a[r * inner + k];
            const float* wr = w + k * cols;
            for (std::size_t j = 0; j < cols; ++j)
                cr[j] += x * wr[j];
        }
    }
}

// dA (+)= dC * W^T
void matmul_bt_acc(const float* dc, const float* w, float* da, std::size_t rows, std::size_t inner, std::size_t cols)
{
    // Transposed copy turns the inner dot products into vectorizable axpys.
    std::vector<float> wt(inner * cols);
    for (std::size_t k = 0; k < inner; ++k)
        for (std::size_t j = 0; j < cols; ++j)
            wt[j * inner + k] = w[k * cols + j];
    for (std::size_t r = 0; r < rows; ++r) {
        const float* dcr = dc + r * cols;
        float* dar = da + r * inner;
        for (std::size_t j = 0; j < cols; ++j) {
            const float g = dcr[j];
            const float* wr = wt.data() + j * inner;
            for (std::size_t k = 0; k < inner; ++k)
                dar[k] += g * wr[k];
        }
    }
}

// dW += A^T * dC
void matmul_at_acc(const float* a, const float* dc, float* dw, std::size_t rows, std::size_t inner, std::size_t cols)
{
    for (std::size_t r = 0; r < rows; ++r) {
        const float* dcr = dc + r * cols;
        for (std::size_t k = 0; k < inner; ++k) {
            const float x = a[r * inner + k];
            float* dwr = dw + k * cols;
            for (std::size_t j = 0; j < cols; ++j)
                dwr[j] += x * dcr[j];
        }
    }
}

struct NormCache {
    std::vector<float> xhat;  // rows x d
    std::vector<float> rstd;  // rows
};

void norm_forward(const float* x, const Tensor& g, const Tensor& b, float* out, NormCache& nc, std::size_t rows,
                  std::size_t d)
{
    nc.xhat.resize(rows * d);
    nc.rstd.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * d;
        float mean = 0.0f;
        for (std::size_t i = 0; i < d; ++i)
            mean += xr[i];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t i = 0; i < d; ++i)
            var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<float>(d);
        const float rstd = 1.0f / std::sqrt(var + kNormEps);
        nc.rstd[r] = rstd;
        for (std::size_t i = 0; i < d; ++i) {
            const float xh = (xr[i] - mean) * rstd;
            nc.xhat[r * d + i] = xh;
            out[r * d + i] = xh * g.data[i] + b.data[i];
        }
    }
}

// dx += norm backward of dout.
void norm_backward(const float* dout, const Tensor& g, const NormCache& nc, float* dx, Tensor& dg, Tensor& db,
                   std::size_t rows, std::size_t d)
{
    std::vector<float> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* dr = dout + r * d;
        const float* xh = nc.xhat.data() + r * d;
        float m1 = 0.0f, m2 = 0.0f;
        for (std::size_t i = 0; i < d; ++i) {
            dg.data[i] += dr[i] * xh[i];
            db.data[i] += dr[i];
            dxhat[i] = dr[i] * g.data[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 /= static_cast<float>(d);
        m2 /= static_cast<float>(d);
        for (std::size_t i = 0; i < d; ++i)
            dx[r * d + i] += nc.rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
    }
}

struct LayerActivations {
    std::vector<float> x;        // input
    NormCache n1;
    std::vector<float> h1, q, k, v;
    std::vector<float> probs;    // heads x T x T (causal, upper part zero)
    std::vector<float> o;        // attention output before wo
    std::vector<float> x1;       // after attention residual
    NormCache n2;
    std::vector<float> h2;
    std::vector<float> z;        // pre-activation (bias included)
    std::vector<float> u;        // relu(z)
};

class SequencePass {
public:
    SequencePass(const TransformerModel& model, std::span<const TokenId> seq) : m_(model), c_(model.config())
    {
        if (seq.size() < 2)
            throw std::invalid_argument("sequence needs at least 2 tokens");
        if (seq.size() - 1 > c_.max_context)
            throw std::length_error("sequence longer than max_context");
        inputs_.assign(seq.begin(), seq.end() - 1);
        targets_.assign(seq.begin() + 1, seq.end());
        t_ = inputs_.size();
    }

    double forward()
    {
        const std::size_t d = c_.hidden_dim, t = t_, f = c_.ffn_dim, v = c_.vocab_size;
        std::vector<float> x(t * d);
        for (std::size_t p = 0; p < t; ++p)
            embed_token(m_, inputs_[p], p, std::span<float>(x.data() + p * d, d));
        acts_.resize(c_.num_layers);
        for (std::size_t l = 0; l < c_.num_layers; ++l) {
            auto& a = acts_[l];
            const auto& w = m_.layers[l];
            a.x = x;
            a.h1.resize(t * d);
            norm_forward(a.x.data(), w.attn_norm_gain, w.attn_norm_bias, a.h1.data(), a.n1, t, d);
            a.q.resize(t * d);
            a.k.resize(t * d);
            a.v.resize(t * d);
            matmul(a.h1.data(), w.wq.data.data(), a.q.data(), t, d, d);
            matmul(a.h1.data(), w.wk.data.data(), a.k.data(), t, d, d);
            matmul(a.h1.data(), w.wv.data.data(), a.v.data(), t, d, d);
            attention_forward(a);
            a.x1.resize(t * d);
            matmul(a.o.data(), w.wo.data.data(), a.x1.data(), t, d, d);
            for (std::size_t i = 0; i < t * d; ++i)
                a.x1[i] += a.x[i];
            a.h2.resize(t * d);
            norm_forward(a.x1.data(), w.ffn_norm_gain, w.ffn_norm_bias, a.h2.data(), a.n2, t, d);
            a.z.resize(t * f);
            a.u.resize(t * f);
            matmul(a.h2.data(), w.w_up.data.data(), a.z.data(), t, d, f);
            for (std::size_t p = 0; p < t; ++p)
                for (std::size_t j = 0; j < f; ++j) {
                    float& z = a.z[p * f + j];
                    z += w.b_up.data[j];
                    a.u[p * f + j] = std::max(0.0f, z);
                }
            matmul(a.u.data(), w.w_down.data.data(), x.data(), t, f, d);
            for (std::size_t p = 0; p < t; ++p)
                for (std::size_t i = 0; i < d; ++i)
                    x[p * d + i] += a.x1[p * d + i] + w.b_down.data[i];
        }
        final_x_ = x;
        normed_.resize(t * d);
        norm_forward(final_x_.data(), m_.final_norm_gain, m_.final_norm_bias, normed_.data(), nf_, t, d);
        probs_.resize(t * v);
        matmul(normed_.data(), m_.lm_head.data.data(), probs_.data(), t, d, v);
        double loss = 0.0;
        for (std::size_t p = 0; p < t; ++p) {
            float* row = probs_.data() + p * v;
            const float mx = *std::max_element(row, row + v);
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (std::size_t j = 0; j < v; ++j)
                row[j] = static_cast<float>(row[j] / sum);
            loss -= std::log(std::max(static_cast<double>(row[targets_[p]]), 1e-30));
        }
        return loss;
    }

    // Gradient of the summed loss into grad (accumulating).
    void backward(TransformerModel& grad) const
    {
        const std::size_t d = c_.hidden_dim, t = t_, f = c_.ffn_dim, v = c_.vocab_size;
        std::vector<float> dlogits = probs_;
        for (std::size_t p = 0; p < t; ++p)
            dlogits[p * v + targets_[p]] -= 1.0f;
        matmul_at_acc(normed_.data(), dlogits.data(), grad.lm_head.data.data(), t, d, v);
        std::vector<float> dnormed(t * d, 0.0f);
        matmul_bt_acc(dlogits.data(), m_.lm_head.data.data(), dnormed.data(), t, d, v);
        std::vector<float> dx(t * d, 0.0f);
        norm_backward(dnormed.data(), m_.final_norm_gain, nf_, dx.data(), grad.final_norm_gain, grad.final_norm_bias,
                      t, d);

        for (std::size_t li = c_.num_layers; li-- > 0;) {
            const auto& a = acts_[li];
            const auto& w = m_.layers[li];
            auto& g = grad.layers[li];
            // FFN block: y = x1 + u*w_down + b_down
            std::vector<float> dx1 = dx;
            for (std::size_t p = 0; p < t; ++p)
                for (std::size_t i = 0; i < d; ++i)
                    g.b_down.data[i] += dx[p * d + i];
            matmul_at_acc(a.u.data(), dx.data(), g.w_down.data.data(), t, f, d);
            std::vector<float> dz(t * f, 0.0f);
            matmul_bt_acc(dx.data(), w.w_down.data.data(), dz.data(), t, f, d);
            for (std::size_t i = 0; i < t * f; ++i)
                if (a.z[i] <= 0.0f)
                    dz[i] = 0.0f;
            for (std::size_t p = 0; p < t; ++p)
                for (std::size_t j = 0; j < f; ++j)
                    g.b_up.data[j] += dz[p * f + j];
            matmul_at_acc(a.h2.data(), dz.data(), g.w_up.data.data(), t, d, f);
            std::vector<float> dh2(t * d, 0.0f);
            matmul_bt_acc(dz.data(), w.w_up.data.data(), dh2.data(), t, d, f);
            norm_backward(dh2.data(), w.ffn_norm_gain, a.n2, dx1.data(), g.ffn_norm_gain, g.ffn_norm_bias, t, d);

            // Attention block: x1 = x + o*wo
            std::vector<float> dxin = dx1;
            matmul_at_acc(a.o.data(), dx1.data(), g.wo.data.data(), t, d, d);
            std::vector<float> dout(t * d, 0.0f);
            matmul_bt_acc(dx1.data(), w.wo.data.data(), dout.data(), t, d, d);
            std::vector<float> dq(t * d, 0.0f), dk(t * d, 0.0f), dv(t * d, 0.0f);
            attention_backward(a, dout, dq, dk, dv);
            matmul_at_acc(a.h1.data(), dq.data(), g.wq.data.data(), t, d, d);
            matmul_at_acc(a.h1.data(), dk.data(), g.wk.data.data(), t, d, d);
            matmul_at_acc(a.h1.data(), dv.data(), g.wv.data.data(), t, d, d);
            std::vector<float> dh1(t * d, 0.0f);
            matmul_bt_acc(dq.data(), w.wq.data.data(), dh1.data(), t, d, d);
            matmul_bt_acc(dk.data(), w.wk.data.data(), dh1.data(), t, d, d);
            matmul_bt_acc(dv.data(), w.wv.data.data(), dh1.data(), t, d, d);
            norm_backward(dh1.data(), w.attn_norm_gain, a.n1, dxin.data(), g.attn_norm_gain, g.attn_norm_bias, t, d);
            dx = std::move(dxin);
        }
        for (std::size_t p = 0; p < t; ++p) {
            float* row = grad.embedding.data.data() + static_cast<std::size_t>(inputs_[p]) * d;
            for (std::size_t i = 0; i < d; ++i)
                row[i] += dx[p * d + i];
        }
    }

private:
    void attention_forward(LayerActivations& a) const
    {
        const std::size_t d = c_.hidden_dim, t = t_, hd = c_.head_dim(), nh = c_.num_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        a.probs.assign(nh * t * t, 0.0f);
        a.o.assign(t * d, 0.0f);
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < t; ++i) {
                float* pr = a.probs.data() + (h * t + i) * t;
                float mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    float s = 0.0f;
                    for (std::size_t e = 0; e < hd; ++e)
                        s += a.q[i * d + off + e] * a.k[j * d + off + e];
                    pr[j] = s * scale;
                    mx = std::max(mx, pr[j]);
                }
                float sum = 0.0f;
                for (std::size_t j = 0; j <= i; ++j) {
                    pr[j] = std::exp(pr[j] - mx);
                    sum += pr[j];
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    pr[j] /= sum;
                    for (std::size_t e = 0; e < hd; ++e)
                        a.o[i * d + off + e] += pr[j] * a.v[j * d + off + e];
                }
            }
        }
    }

    void attention_backward(const LayerActivations& a, const std::vector<float>& dout, std::vector<float>& dq,
                            std::vector<float>& dk, std::vector<float>& dv) const
    {
        const std::size_t d = c_.hidden_dim, t = t_, hd = c_.head_dim(), nh = c_.num_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        std::vector<float> dp(t);
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < t; ++i) {
                const float* pr = a.probs.data() + (h * t + i) * t;
                const float* go = dout.data() + i * d + off;
                float dot = 0.0f;
                for (std::size_t j = 0; j <= i; ++j) {
                    float s = 0.0f;
                    for (std::size_t e = 0; e < hd; ++e) {
                        s += go[e] * a.v[j * d + off + e];
                        dv[j * d + off + e] += pr[j] * go[e];
                    }
                    dp[j] = s;
                    dot += pr[j] * s;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const float ds = pr[j] * (dp[j] - dot) * scale;
                    for (std::size_t e = 0; e < hd; ++e) {
                        dq[i * d + off + e] += ds * a.k[j * d + off + e];
                        dk[j * d + off + e] += ds * a.q[i * d + off + e];
                    }
                }
            }
        }
    }

    const TransformerModel& m_;
    const ModelConfig& c_;
    std::vector<TokenId> inputs_, targets_;
    std::size_t t_ = 0;
    std::vector<LayerActivations> acts_;
    std::vector<float> final_x_, normed_, probs_;
    NormCache nf_;
};

}  // namespace

std::vector<TokenId> bytes_to_tokens(std::span<const std::uint8_t> bytes)
{
    return {bytes.begin(), bytes.end()};
}

double sequence_loss(const TransformerModel& model, std::span<const TokenId> seq)
{
    SequencePass pass(model, seq);
    return pass.forward() / static_cast<double>(seq.size() - 1);
}

double loss_and_gradient(const TransformerModel& model, std::span<const TokenId> seq, TransformerModel& grad)
{
    if (!(grad.config() == model.config()))
        throw std::invalid_argument("gradient buffer config mismatch");
    SequencePass pass(model, seq);
    const double loss = pass.forward();
    pass.backward(grad);
    return loss;
}

TrainReport train_language_model(TransformerModel& model, std::span<const TokenId> corpus, const TrainConfig& config)
{
    if (corpus.size() < 2)
        throw std::invalid_argument("training corpus is empty");
    if (config.seq_len < 1 || config.batch_size < 1)
        throw std::invalid_argument("seq_len and batch_size must be positive");
    const std::size_t window = std::min<std::size_t>(config.seq_len + 1, corpus.size());
    if (window - 1 > model.config().max_context)
        throw std::invalid_argument("seq_len exceeds max_context");

    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + window <= corpus.size(); s += window - 1)
        starts.push_back(s);

    TrainReport report;
    SplitMix64 rng(config.seed);
    TransformerModel grad(model.config());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = starts.size(); i > 1; --i)
            std::swap(starts[i - 1], starts[rng.below(i)]);
        std::size_t batches = (starts.size() + config.batch_size - 1) / config.batch_size;
        if (config.max_batches_per_epoch > 0)
            batches = std::min(batches, config.max_batches_per_epoch);
        double epoch_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            grad.visit([](Tensor& t) { std::fill(t.data.begin(), t.data.end(), 0.0f); });
            double loss = 0.0;
            std::size_t count = 0;
            for (std::size_t i = b * config.batch_size; i < std::min(starts.size(), (b + 1) * config.batch_size); ++i) {
                loss += loss_and_gradient(model, corpus.subspan(starts[i], window), grad);
                count += window - 1;
            }
            const float inv = 1.0f / static_cast<float>(count);
            double norm2 = 0.0;
            grad.visit([&](Tensor& t) {
                for (auto& g : t.data) {
                    g *= inv;
                    norm2 += static_cast<double>(g) * g;
                }
            });
            float step = config.learning_rate;
            const double norm = std::sqrt(norm2);
            if (config.grad_clip > 0.0f && norm > config.grad_clip)
                step *= static_cast<float>(config.grad_clip / norm);
            std::vector<Tensor*> grads;
            grad.visit([&](Tensor& t) { grads.push_back(&t); });
            std::size_t idx = 0;
            model.visit([&](Tensor& t) {
                const auto& g = grads[idx++]->data;
                for (std::size_t i = 0; i < t.data.size(); ++i)
                    t.data[i] -= step * g[i];
            });
            const double mean = loss / static_cast<double>(count);
            report.step_loss.push_back(mean);
            epoch_sum += mean;
        }
        report.epoch_loss.push_back(batches ? epoch_sum / static_cast<double>(batches) : 0.0);
    }
    return report;
}

}  // namespace specee
