#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "m2m/common.hpp"
#include "m2m/dsp.hpp"

namespace m2m {

// Training data regimes: mono and mixed share one parameter set across all
// triplet roles; cross keeps an anchor network for monophonic input and a
// separate network for mixed input.
enum class TrainMode : std::uint8_t { mono = 0, mixed = 1, cross = 2 };

enum class Phase { train, infer };

// A batch of 1-D feature maps, n items x ch channels x len steps, contiguous
// in time so the convolution inner loops vectorize.
template <typename T>
struct Batch {
    int n = 0;
    int ch = 0;
    int len = 0;
    std::vector<T> v;

    Batch() = default;
    Batch(int n_, int ch_, int len_)
        : n(n_), ch(ch_), len(len_),
          v(static_cast<std::size_t>(n_) * ch_ * len_, T(0)) {}

    T& at(int i, int c, int t) {
        return v[(static_cast<std::size_t>(i) * ch + c) * len + t];
    }
    T at(int i, int c, int t) const {
        return v[(static_cast<std::size_t>(i) * ch + c) * len + t];
    }
    T* row(int i, int c) {
        return v.data() + (static_cast<std::size_t>(i) * ch + c) * len;
    }
    const T* row(int i, int c) const {
        return v.data() + (static_cast<std::size_t>(i) * ch + c) * len;
    }
};

// Named view of one parameter tensor and its gradient; grad is null for
// state that is saved but never optimized (batchnorm running statistics).
template <typename T>
struct TensorRef {
    std::string name;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;
};

// Temporal convolution, stride 1, zero same-padding (odd kernel). Caches its
// input; backward accumulates weight/bias gradients and returns dL/dx.
template <typename T>
struct ConvLayer {
    int in_ch = 0;
    int out_ch = 0;
    int k = 1;
    std::vector<T> w;  // out_ch x in_ch x k
    std::vector<T> b;  // out_ch
    std::vector<T> gw, gb;
    Batch<T> x_cache;

    ConvLayer() = default;
    ConvLayer(int in, int out, int kernel)
        : in_ch(in), out_ch(out), k(kernel),
          w(static_cast<std::size_t>(out) * in * kernel, T(0)), b(out, T(0)),
          gw(w.size(), T(0)), gb(out, T(0)) {
        if (kernel % 2 == 0) {
            throw ConfigError("ConvLayer: kernel must be odd for same-padding");
        }
    }

    void init(Rng& rng) {
        // Uniform Kaiming-style fan-in scaling; keeps activations O(1).
        const double bound = std::sqrt(1.0 / (in_ch * k));
        for (T& x : w) x = static_cast<T>(rng.next_real(-bound, bound));
        for (T& x : b) x = static_cast<T>(rng.next_real(-bound, bound));
    }

    const T& wat(int o, int i, int dk) const {
        return w[(static_cast<std::size_t>(o) * in_ch + i) * k + dk];
    }
    T& wat(int o, int i, int dk) {
        return w[(static_cast<std::size_t>(o) * in_ch + i) * k + dk];
    }

    Batch<T> forward(const Batch<T>& x) {
        if (x.ch != in_ch) {
            throw ConfigError("ConvLayer: shape mismatch, got " +
                              std::to_string(x.ch) + " channels, want " +
                              std::to_string(in_ch));
        }
        x_cache = x;
        Batch<T> y(x.n, out_ch, x.len);
        const int pad = (k - 1) / 2;
        for (int i = 0; i < x.n; ++i) {
            for (int o = 0; o < out_ch; ++o) {
                T* __restrict__ yr = y.row(i, o);
                for (int t = 0; t < x.len; ++t) yr[t] = b[o];
                for (int c = 0; c < in_ch; ++c) {
                    const T* __restrict__ xr = x.row(i, c);
                    if (k == 1) {
                        const T wv = wat(o, c, 0);
                        for (int t = 0; t < x.len; ++t) yr[t] += wv * xr[t];
                        continue;
                    }
                    if (k == 3 && x.len >= 2) {
                        // Fused single pass; edge samples lack the out-of-range tap.
                        const T w0 = wat(o, c, 0), w1 = wat(o, c, 1), w2 = wat(o, c, 2);
                        const int last = x.len - 1;
                        yr[0] += w1 * xr[0] + w2 * xr[1];
                        for (int t = 1; t < last; ++t) {
                            yr[t] += w0 * xr[t - 1] + w1 * xr[t] + w2 * xr[t + 1];
                        }
                        yr[last] += w0 * xr[last - 1] + w1 * xr[last];
                        continue;
                    }
                    for (int dk = 0; dk < k; ++dk) {
                        const T wv = wat(o, c, dk);
                        const int shift = dk - pad;
                        const int t0 = std::max(0, -shift);
                        const int t1 = std::min(x.len, x.len - shift);
                        for (int t = t0; t < t1; ++t) {
                            yr[t] += wv * xr[t + shift];
                        }
                    }
                }
            }
        }
        return y;
    }

    // Three passes, each ordered so the row being accumulated stays cache-hot
    // while the other operand streams: bias (g rows), weights (g row fixed,
    // x rows stream), input gradient (dx row fixed, g rows stream).
    Batch<T> backward(const Batch<T>& g) {
        const Batch<T>& x = x_cache;
        Batch<T> dx(x.n, in_ch, x.len);
        const int pad = (k - 1) / 2;
        const int len = x.len;
        const int last = len - 1;
        for (int i = 0; i < x.n; ++i) {
            for (int o = 0; o < out_ch; ++o) {
                const T* __restrict__ gr = g.row(i, o);
                double gbacc = 0.0;
                for (int t = 0; t < len; ++t) gbacc += gr[t];
                gb[o] += static_cast<T>(gbacc);
            }
        }
        for (int i = 0; i < x.n; ++i) {
            for (int o = 0; o < out_ch; ++o) {
                const T* __restrict__ gr = g.row(i, o);
                for (int c = 0; c < in_ch; ++c) {
                    const T* __restrict__ xr = x.row(i, c);
                    if (k == 1) {
                        double a = 0.0;
                        for (int t = 0; t < len; ++t) a += gr[t] * xr[t];
                        wat_g(o, c, 0) += static_cast<T>(a);
                        continue;
                    }
                    if (k == 3 && len >= 16) {
                        // Vector-width T accumulators; the T-precision loss is
                        // far below gradient-check tolerance.
                        T a0 = T(0), a1 = gr[0] * xr[0], a2 = gr[0] * xr[1];
#pragma omp simd reduction(+ : a0, a1, a2)
                        for (int t = 1; t < last; ++t) {
                            a0 += gr[t] * xr[t - 1];
                            a1 += gr[t] * xr[t];
                            a2 += gr[t] * xr[t + 1];
                        }
                        a0 += gr[last] * xr[last - 1];
                        a1 += gr[last] * xr[last];
                        wat_g(o, c, 0) += a0;
                        wat_g(o, c, 1) += a1;
                        wat_g(o, c, 2) += a2;
                        continue;
                    }
                    if (k == 3 && len >= 2) {
                        double a0 = 0.0, a1 = gr[0] * xr[0], a2 = gr[0] * xr[1];
                        for (int t = 1; t < last; ++t) {
                            a0 += gr[t] * xr[t - 1];
                            a1 += gr[t] * xr[t];
                            a2 += gr[t] * xr[t + 1];
                        }
                        a0 += gr[last] * xr[last - 1];
                        a1 += gr[last] * xr[last];
                        wat_g(o, c, 0) += static_cast<T>(a0);
                        wat_g(o, c, 1) += static_cast<T>(a1);
                        wat_g(o, c, 2) += static_cast<T>(a2);
                        continue;
                    }
                    for (int dk = 0; dk < k; ++dk) {
                        const int shift = dk - pad;
                        const int t0 = std::max(0, -shift);
                        const int t1 = std::min(len, len - shift);
                        double gwacc = 0.0;
                        for (int t = t0; t < t1; ++t) gwacc += gr[t] * xr[t + shift];
                        wat_g(o, c, dk) += static_cast<T>(gwacc);
                    }
                }
            }
        }
        for (int i = 0; i < x.n; ++i) {
            for (int c = 0; c < in_ch; ++c) {
                T* __restrict__ dxr = dx.row(i, c);
                for (int o = 0; o < out_ch; ++o) {
                    const T* __restrict__ gr = g.row(i, o);
                    if (k == 1) {
                        const T wv = wat(o, c, 0);
                        for (int t = 0; t < len; ++t) dxr[t] += wv * gr[t];
                        continue;
                    }
                    if (k == 3 && len >= 2) {
                        const T w0 = wat(o, c, 0), w1 = wat(o, c, 1), w2 = wat(o, c, 2);
                        dxr[0] += w0 * gr[1] + w1 * gr[0];
                        for (int t = 1; t < last; ++t) {
                            dxr[t] += w0 * gr[t + 1] + w1 * gr[t] + w2 * gr[t - 1];
                        }
                        dxr[last] += w1 * gr[last] + w2 * gr[last - 1];
                        continue;
                    }
                    for (int dk = 0; dk < k; ++dk) {
                        const int shift = dk - pad;
                        const int t0 = std::max(0, -shift);
                        const int t1 = std::min(len, len - shift);
                        const T wv = wat(o, c, dk);
                        for (int t = t0; t < t1; ++t) dxr[t + shift] += wv * gr[t];
                    }
                }
            }
        }
        return dx;
    }

    T& wat_g(int o, int i, int dk) {
        return gw[(static_cast<std::size_t>(o) * in_ch + i) * k + dk];
    }
};

// Batch normalization over (items x time) per channel. Training normalizes
// by batch statistics and updates running statistics with keep-factor
// `momentum` (running = momentum * running + (1 - momentum) * batch);
// inference normalizes by the running statistics.
template <typename T>
struct BatchNormLayer {
    int ch = 0;
    double momentum = 0.9;
    double eps = 1e-5;
    std::vector<T> gamma, beta, ggamma, gbeta;
    std::vector<T> running_mean, running_var;

    // caches for backward
    Batch<T> xhat;
    std::vector<double> inv_std;
    bool last_train = false;

    BatchNormLayer() = default;
    explicit BatchNormLayer(int channels)
        : ch(channels), gamma(channels, T(1)), beta(channels, T(0)),
          ggamma(channels, T(0)), gbeta(channels, T(0)),
          running_mean(channels, T(0)), running_var(channels, T(1)) {}

    Batch<T> forward(const Batch<T>& x, bool train) {
        if (x.ch != ch) throw ConfigError("BatchNormLayer: shape mismatch");
        last_train = train;
        Batch<T> y(x.n, x.ch, x.len);
        xhat = Batch<T>(x.n, x.ch, x.len);
        inv_std.assign(ch, 0.0);
        const double count = static_cast<double>(x.n) * x.len;
        for (int c = 0; c < ch; ++c) {
            double mean, var;
            if (train) {
                double s = 0.0;
                for (int i = 0; i < x.n; ++i) {
                    const T* __restrict__ xr = x.row(i, c);
#pragma omp simd reduction(+ : s)
                    for (int t = 0; t < x.len; ++t) s += xr[t];
                }
                mean = s / count;
                double sq = 0.0;
                for (int i = 0; i < x.n; ++i) {
                    const T* __restrict__ xr = x.row(i, c);
#pragma omp simd reduction(+ : sq)
                    for (int t = 0; t < x.len; ++t) {
                        const double d = xr[t] - mean;
                        sq += d * d;
                    }
                }
                var = sq / count;  // biased, used for normalization
                const double unbiased =
                    count > 1.0 ? sq / (count - 1.0) : var;
                running_mean[c] = static_cast<T>(momentum * running_mean[c] +
                                                 (1.0 - momentum) * mean);
                running_var[c] = static_cast<T>(momentum * running_var[c] +
                                                (1.0 - momentum) * unbiased);
            } else {
                mean = running_mean[c];
                var = running_var[c];
            }
            const double istd = 1.0 / std::sqrt(var + eps);
            inv_std[c] = istd;
            for (int i = 0; i < x.n; ++i) {
                const T* xr = x.row(i, c);
                T* hr = xhat.row(i, c);
                T* yr = y.row(i, c);
                for (int t = 0; t < x.len; ++t) {
                    hr[t] = static_cast<T>((xr[t] - mean) * istd);
                    yr[t] = static_cast<T>(gamma[c] * hr[t] + beta[c]);
                }
            }
        }
        return y;
    }

    Batch<T> backward(const Batch<T>& g) {
        Batch<T> dx(g.n, g.ch, g.len);
        const double count = static_cast<double>(g.n) * g.len;
        for (int c = 0; c < ch; ++c) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (int i = 0; i < g.n; ++i) {
                const T* __restrict__ gr = g.row(i, c);
                const T* __restrict__ hr = xhat.row(i, c);
#pragma omp simd reduction(+ : sum_g, sum_gh)
                for (int t = 0; t < g.len; ++t) {
                    sum_g += gr[t];
                    sum_gh += static_cast<double>(gr[t]) * hr[t];
                }
            }
            ggamma[c] += static_cast<T>(sum_gh);
            gbeta[c] += static_cast<T>(sum_g);
            const double scale = gamma[c] * inv_std[c];
            if (last_train) {
                const double mg = sum_g / count;
                const double mgh = sum_gh / count;
                for (int i = 0; i < g.n; ++i) {
                    const T* gr = g.row(i, c);
                    const T* hr = xhat.row(i, c);
                    T* dr = dx.row(i, c);
                    for (int t = 0; t < g.len; ++t) {
                        dr[t] = static_cast<T>(scale *
                                               (gr[t] - mg - hr[t] * mgh));
                    }
                }
            } else {
                // Running statistics are constants at inference.
                for (int i = 0; i < g.n; ++i) {
                    const T* gr = g.row(i, c);
                    T* dr = dx.row(i, c);
                    for (int t = 0; t < g.len; ++t) {
                        dr[t] = static_cast<T>(scale * gr[t]);
                    }
                }
            }
        }
        return dx;
    }
};

template <typename T>
struct LeakyReluLayer {
    double slope = 0.01;
    Batch<T> x_cache;

    Batch<T> forward(const Batch<T>& x) {
        x_cache = x;
        Batch<T> y = x;
        for (T& v : y.v) {
            if (v < T(0)) v = static_cast<T>(slope * v);
        }
        return y;
    }

    Batch<T> backward(const Batch<T>& g) {
        Batch<T> dx = g;
        for (std::size_t i = 0; i < dx.v.size(); ++i) {
            if (x_cache.v[i] < T(0)) {
                dx.v[i] = static_cast<T>(slope * dx.v[i]);
            }
        }
        return dx;
    }
};

// Max-pool size 3, stride 3, no padding: output length floor(len / 3); a
// trailing partial window is dropped.
template <typename T>
struct MaxPoolLayer {
    int size = 3;
    std::vector<int> argmax;  // flat index per output element
    Batch<T> x_cache;

    Batch<T> forward(const Batch<T>& x) {
        const int out_len = x.len / size;
        if (out_len < 1) {
            throw ConfigError("MaxPoolLayer: input length " +
                              std::to_string(x.len) + " shorter than pool");
        }
        x_cache = x;
        Batch<T> y(x.n, x.ch, out_len);
        argmax.assign(y.v.size(), 0);
        std::size_t oi = 0;
        for (int i = 0; i < x.n; ++i) {
            for (int c = 0; c < x.ch; ++c) {
                const T* xr = x.row(i, c);
                for (int t = 0; t < out_len; ++t, ++oi) {
                    int best = t * size;
                    for (int d = 1; d < size; ++d) {
                        if (xr[t * size + d] > xr[best]) best = t * size + d;
                    }
                    y.v[oi] = xr[best];
                    argmax[oi] =
                        static_cast<int>((static_cast<std::size_t>(i) * x.ch +
                                          c) *
                                         x.len) +
                        best;
                }
            }
        }
        return y;
    }

    Batch<T> backward(const Batch<T>& g) {
        Batch<T> dx(x_cache.n, x_cache.ch, x_cache.len);
        for (std::size_t oi = 0; oi < g.v.size(); ++oi) {
            dx.v[static_cast<std::size_t>(argmax[oi])] += g.v[oi];
        }
        return dx;
    }
};

// Inverted dropout: in training, elements are zeroed with probability `rate`
// and survivors scaled by 1/(1-rate); inference is the identity. The mask is
// fully determined by the seed passed to forward.
template <typename T>
struct DropoutLayer {
    double rate = 0.5;
    std::vector<T> mask;

    Batch<T> forward(const Batch<T>& x, bool train, std::uint64_t seed) {
        if (!train) {
            mask.assign(x.v.size(), T(1));
            return x;
        }
        Rng rng(derive_seed(seed, "dropout"));
        const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
        mask.assign(x.v.size(), T(0));
        Batch<T> y = x;
        for (std::size_t i = 0; i < y.v.size(); ++i) {
            if (rng.next_real() >= rate) {
                mask[i] = keep_scale;
                y.v[i] = static_cast<T>(y.v[i] * keep_scale);
            } else {
                y.v[i] = T(0);
            }
        }
        return y;
    }

    Batch<T> backward(const Batch<T>& g) {
        Batch<T> dx = g;
        for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= mask[i];
        return dx;
    }
};

// Global temporal max-pool: ch x len -> ch x 1.
template <typename T>
struct GlobalMaxPoolLayer {
    std::vector<int> argmax;
    Batch<T> x_cache;

    Batch<T> forward(const Batch<T>& x) {
        x_cache = x;
        Batch<T> y(x.n, x.ch, 1);
        argmax.assign(static_cast<std::size_t>(x.n) * x.ch, 0);
        for (int i = 0; i < x.n; ++i) {
            for (int c = 0; c < x.ch; ++c) {
                const T* xr = x.row(i, c);
                int best = 0;
                for (int t = 1; t < x.len; ++t) {
                    if (xr[t] > xr[best]) best = t;
                }
                y.at(i, c, 0) = xr[best];
                argmax[static_cast<std::size_t>(i) * x.ch + c] = best;
            }
        }
        return y;
    }

    Batch<T> backward(const Batch<T>& g) {
        Batch<T> dx(x_cache.n, x_cache.ch, x_cache.len);
        for (int i = 0; i < dx.n; ++i) {
            for (int c = 0; c < dx.ch; ++c) {
                dx.at(i, c, argmax[static_cast<std::size_t>(i) * dx.ch + c]) =
                    g.at(i, c, 0);
            }
        }
        return dx;
    }
};

// The five-layer temporal CNN. Mel bands enter as channels; layers 1-3 are
// conv3 -> batchnorm -> leaky ReLU -> pool3 (129 -> 43 -> 14 -> 4), layer 4
// is conv3 -> batchnorm -> leaky ReLU at length 4, then conv5 (size 1) maps
// to the embedding width, dropout (train only), and a global temporal
// max-pool produces one vector per item.
template <typename T>
class SkeletonNet {
public:
    explicit SkeletonNet(int in_channels = kMelBands, int hidden = 128,
                         int embed_dim = 256)
        : in_ch_(in_channels), hidden_(hidden), embed_(embed_dim) {
        convs_.emplace_back(in_channels, hidden, 3);
        for (int l = 1; l < 4; ++l) convs_.emplace_back(hidden, hidden, 3);
        for (int l = 0; l < 4; ++l) bns_.emplace_back(hidden);
        relus_.resize(4);
        pools_.resize(3);
        conv5_ = ConvLayer<T>(hidden, embed_dim, 1);
    }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "skeleton-init"));
        for (auto& c : convs_) c.init(rng);
        conv5_.init(rng);
        for (auto& bn : bns_) {
            std::fill(bn.gamma.begin(), bn.gamma.end(), T(1));
            std::fill(bn.beta.begin(), bn.beta.end(), T(0));
            std::fill(bn.running_mean.begin(), bn.running_mean.end(), T(0));
            std::fill(bn.running_var.begin(), bn.running_var.end(), T(1));
        }
    }

    int in_channels() const { return in_ch_; }
    int hidden_channels() const { return hidden_; }
    int embed_dim() const { return embed_; }

    // Embeddings for a batch, n x embed x 1. Records the temporal length
    // after every stage in `temporal_trace` (input first, 1 last).
    Batch<T> forward(const Batch<T>& x, Phase phase,
                     std::uint64_t dropout_seed) {
        if (x.ch != in_ch_) {
            throw ConfigError("SkeletonNet: shape mismatch, input has " +
                              std::to_string(x.ch) + " channels, want " +
                              std::to_string(in_ch_));
        }
        const bool train = phase == Phase::train;
        temporal_trace.clear();
        temporal_trace.push_back(x.len);
        Batch<T> h = x;
        for (int l = 0; l < 4; ++l) {
            h = convs_[l].forward(h);
            h = bns_[l].forward(h, train);
            h = relus_[l].forward(h);
            if (l < 3) {
                h = pools_[l].forward(h);
                temporal_trace.push_back(h.len);
            }
        }
        h = conv5_.forward(h);
        h = dropout_.forward(h, train, dropout_seed);
        h = global_pool_.forward(h);
        temporal_trace.push_back(h.len);
        return h;
    }

    // dL/d(embeddings) in, parameter gradients accumulated, dL/d(input) out.
    Batch<T> backward(const Batch<T>& g) {
        Batch<T> h = global_pool_.backward(g);
        h = dropout_.backward(h);
        h = conv5_.backward(h);
        for (int l = 3; l >= 0; --l) {
            if (l < 3) h = pools_[l].backward(h);
            h = relus_[l].backward(h);
            h = bns_[l].backward(h);
            h = convs_[l].backward(h);
        }
        return h;
    }

    void zero_grad() {
        for (auto& c : convs_) {
            std::fill(c.gw.begin(), c.gw.end(), T(0));
            std::fill(c.gb.begin(), c.gb.end(), T(0));
        }
        for (auto& bn : bns_) {
            std::fill(bn.ggamma.begin(), bn.ggamma.end(), T(0));
            std::fill(bn.gbeta.begin(), bn.gbeta.end(), T(0));
        }
        std::fill(conv5_.gw.begin(), conv5_.gw.end(), T(0));
        std::fill(conv5_.gb.begin(), conv5_.gb.end(), T(0));
    }

    // Trainable tensors in the declared checkpoint order.
    std::vector<TensorRef<T>> parameters() {
        std::vector<TensorRef<T>> out;
        for (int l = 0; l < 4; ++l) {
            const std::string p = "conv" + std::to_string(l + 1);
            out.push_back({p + ".w", &convs_[l].w, &convs_[l].gw});
            out.push_back({p + ".b", &convs_[l].b, &convs_[l].gb});
            const std::string q = "bn" + std::to_string(l + 1);
            out.push_back({q + ".gamma", &bns_[l].gamma, &bns_[l].ggamma});
            out.push_back({q + ".beta", &bns_[l].beta, &bns_[l].gbeta});
        }
        out.push_back({"conv5.w", &conv5_.w, &conv5_.gw});
        out.push_back({"conv5.b", &conv5_.b, &conv5_.gb});
        return out;
    }

    // Saved-but-not-optimized tensors, after the trainables in checkpoints.
    std::vector<TensorRef<T>> state_tensors() {
        std::vector<TensorRef<T>> out;
        for (int l = 0; l < 4; ++l) {
            const std::string q = "bn" + std::to_string(l + 1);
            out.push_back({q + ".running_mean", &bns_[l].running_mean,
                           nullptr});
            out.push_back({q + ".running_var", &bns_[l].running_var,
                           nullptr});
        }
        return out;
    }

    std::vector<TensorRef<T>> all_tensors() {
        auto out = parameters();
        auto st = state_tensors();
        out.insert(out.end(), st.begin(), st.end());
        return out;
    }

    // Hash of every discrete decision taken by the cached forward pass:
    // leaky-ReLU branch per element and argmax per pool window. Two forward
    // passes with equal signatures evaluated the same smooth piece of the
    // network function, so central differences between them estimate the
    // derivative the analytic backward computes.
    std::uint64_t decision_signature() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& relu : relus_) {
            for (T v : relu.x_cache.v) {
                const unsigned char bit = v < T(0) ? 1 : 0;
                h = fnv1a64(&bit, 1, h);
            }
        }
        for (const auto& pool : pools_) {
            h = fnv1a64(pool.argmax.data(),
                        pool.argmax.size() * sizeof(int), h);
        }
        h = fnv1a64(global_pool_.argmax.data(),
                    global_pool_.argmax.size() * sizeof(int), h);
        return h;
    }

    // Smallest distance to a non-smooth decision boundary in the cached
    // forward pass: leaky-ReLU inputs near zero and max-pool windows whose
    // top two candidates nearly tie. Finite-difference tests reject
    // instances whose margin is below the probe step. A global-pool tie at
    // exactly zero comes from two dropout-zeroed elements and is harmless
    // (the mask kills the gradient either way), so it is skipped.
    double min_kink_margin() const {
        double margin = std::numeric_limits<double>::infinity();
        for (const auto& relu : relus_) {
            for (T v : relu.x_cache.v) {
                margin = std::min(margin, std::abs(static_cast<double>(v)));
            }
        }
        for (const auto& pool : pools_) {
            margin = std::min(margin,
                              window_gap_margin(pool.x_cache, pool.size));
        }
        margin = std::min(margin, window_gap_margin(global_pool_.x_cache,
                                                    global_pool_.x_cache.len));
        return margin;
    }

    std::vector<int> temporal_trace;  // filled by forward

private:
    static double window_gap_margin(const Batch<T>& x, int size) {
        double margin = std::numeric_limits<double>::infinity();
        if (size < 2) return margin;
        for (int i = 0; i < x.n; ++i) {
            for (int c = 0; c < x.ch; ++c) {
                const T* xr = x.row(i, c);
                for (int t = 0; t + size <= x.len; t += size) {
                    double top1 = -std::numeric_limits<double>::infinity();
                    double top2 = top1;
                    for (int d = 0; d < size; ++d) {
                        const double v = xr[t + d];
                        if (v > top1) {
                            top2 = top1;
                            top1 = v;
                        } else if (v > top2) {
                            top2 = v;
                        }
                    }
                    if (top1 == 0.0 && top2 == 0.0) continue;
                    margin = std::min(margin, top1 - top2);
                }
            }
        }
        return margin;
    }

    int in_ch_, hidden_, embed_;
    std::vector<ConvLayer<T>> convs_;
    std::vector<BatchNormLayer<T>> bns_;
    std::vector<LeakyReluLayer<T>> relus_;
    std::vector<MaxPoolLayer<T>> pools_;
    ConvLayer<T> conv5_;
    DropoutLayer<T> dropout_;
    GlobalMaxPoolLayer<T> global_pool_;
};

// Linear layer + softmax head used only during classification pre-training.
template <typename T>
struct ClassifierHead {
    int n_classes = 0;
    int in_dim = 0;
    std::vector<T> w;  // n_classes x in_dim
    std::vector<T> b;
    std::vector<T> gw, gb;
    std::vector<T> x_cache;  // batch inputs, n x in_dim
    int n_cache = 0;

    ClassifierHead() = default;
    ClassifierHead(int classes, int dim)
        : n_classes(classes), in_dim(dim),
          w(static_cast<std::size_t>(classes) * dim, T(0)), b(classes, T(0)),
          gw(w.size(), T(0)), gb(classes, T(0)) {}

    void init(Rng& rng) {
        const double bound = std::sqrt(1.0 / in_dim);
        for (T& x : w) x = static_cast<T>(rng.next_real(-bound, bound));
        for (T& x : b) x = T(0);
    }

    // Logits for a batch of embeddings (n x in_dim flattened).
    std::vector<T> forward(const std::vector<T>& x, int n) {
        if (static_cast<int>(x.size()) != n * in_dim) {
            throw ConfigError("ClassifierHead: shape mismatch");
        }
        x_cache = x;
        n_cache = n;
        std::vector<T> logits(static_cast<std::size_t>(n) * n_classes);
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < n_classes; ++c) {
                double acc = b[c];
                const T* wr = w.data() + static_cast<std::size_t>(c) * in_dim;
                const T* xr = x.data() + static_cast<std::size_t>(i) * in_dim;
                for (int d = 0; d < in_dim; ++d) acc += wr[d] * xr[d];
                logits[static_cast<std::size_t>(i) * n_classes + c] =
                    static_cast<T>(acc);
            }
        }
        return logits;
    }

    // dL/dlogits in, parameter grads accumulated, dL/dx out.
    std::vector<T> backward(const std::vector<T>& glogits) {
        std::vector<T> dx(static_cast<std::size_t>(n_cache) * in_dim, T(0));
        for (int i = 0; i < n_cache; ++i) {
            const T* gr = glogits.data() +
                          static_cast<std::size_t>(i) * n_classes;
            const T* xr = x_cache.data() + static_cast<std::size_t>(i) * in_dim;
            T* dxr = dx.data() + static_cast<std::size_t>(i) * in_dim;
            for (int c = 0; c < n_classes; ++c) {
                gb[c] += gr[c];
                T* gwr = gw.data() + static_cast<std::size_t>(c) * in_dim;
                for (int d = 0; d < in_dim; ++d) {
                    gwr[d] += gr[c] * xr[d];
                    dxr[d] += w[static_cast<std::size_t>(c) * in_dim + d] *
                              gr[c];
                }
            }
        }
        return dx;
    }
};

// Numerically stable softmax (max-shifted, double accumulation).
template <typename T>
std::vector<T> softmax(const std::vector<T>& logits) {
    if (logits.empty()) throw ConfigError("softmax: empty input");
    double mx = logits[0];
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<T> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double e = std::exp(static_cast<double>(logits[i]) - mx);
        out[i] = static_cast<T>(e);
        sum += e;
    }
    for (T& v : out) v = static_cast<T>(v / sum);
    return out;
}

// -ln(p[target] + 1e-12); the epsilon guards digitally-zero probabilities.
template <typename T>
double cross_entropy_loss(const std::vector<T>& probs, int target) {
    if (target < 0 || target >= static_cast<int>(probs.size())) {
        throw ConfigError("cross_entropy_loss: target index out of range");
    }
    return -std::log(static_cast<double>(probs[target]) + 1e-12);
}

template <typename T>
double l2_norm(const std::vector<T>& v) {
    double acc = 0.0;
    for (T x : v) acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
}

// a.b / (|a| |b|); zero vectors have no direction and throw NumericError.
template <typename T>
double cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
    if (a.size() != b.size()) {
        throw ConfigError("cosine_similarity: dimension mismatch");
    }
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("cosine_similarity: zero vector");
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
    }
    return dot / (na * nb);
}

// Sum over negatives of max(0, margin - S(anchor, positive) +
// S(anchor, negative)).
template <typename T>
double hinge_rank_loss(const std::vector<T>& anchor,
                       const std::vector<T>& positive,
                       const std::vector<std::vector<T>>& negatives,
                       double margin) {
    if (negatives.empty()) {
        throw ConfigError("hinge_rank_loss: need at least one negative");
    }
    const double sp = cosine_similarity(anchor, positive);
    double loss = 0.0;
    for (const auto& nvec : negatives) {
        loss += std::max(0.0, margin - sp + cosine_similarity(anchor, nvec));
    }
    return loss;
}

// Gradient of cosine_similarity(a, b) w.r.t. both inputs, scaled by
// upstream; accumulates into da/db.
template <typename T>
void cosine_similarity_backward(const std::vector<T>& a,
                                const std::vector<T>& b, double upstream,
                                std::vector<T>& da, std::vector<T>& db) {
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("cosine_similarity_backward: zero vector");
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
    }
    const double s = dot / (na * nb);
    for (std::size_t i = 0; i < a.size(); ++i) {
        da[i] += static_cast<T>(upstream *
                                (b[i] / (na * nb) - s * a[i] / (na * na)));
        db[i] += static_cast<T>(upstream *
                                (a[i] / (na * nb) - s * b[i] / (nb * nb)));
    }
}

// Exact gradients of hinge_rank_loss w.r.t. every embedding; accumulates
// into the g* outputs (which must be pre-sized and may carry other terms).
template <typename T>
double hinge_rank_loss_backward(const std::vector<T>& anchor,
                                const std::vector<T>& positive,
                                const std::vector<std::vector<T>>& negatives,
                                double margin, std::vector<T>& ganchor,
                                std::vector<T>& gpositive,
                                std::vector<std::vector<T>>& gnegatives) {
    const double sp = cosine_similarity(anchor, positive);
    double loss = 0.0;
    int active = 0;
    for (std::size_t j = 0; j < negatives.size(); ++j) {
        const double sn = cosine_similarity(anchor, negatives[j]);
        const double term = margin - sp + sn;
        if (term > 0.0) {
            loss += term;
            ++active;
            cosine_similarity_backward(anchor, negatives[j], 1.0, ganchor,
                                       gnegatives[j]);
        }
    }
    if (active > 0) {
        cosine_similarity_backward(anchor, positive,
                                   -static_cast<double>(active), ganchor,
                                   gpositive);
    }
    return loss;
}

// 129 x 128 mel input as a single-item batch: bands become channels.
template <typename T>
Batch<T> mel_to_batch(const MelSpectrogram& mel) {
    Batch<T> x(1, mel.bands, mel.frames);
    for (int t = 0; t < mel.frames; ++t) {
        for (int c = 0; c < mel.bands; ++c) {
            x.at(0, c, t) = static_cast<T>(mel.at(t, c));
        }
    }
    return x;
}

template <typename T>
void mel_into_batch(const MelSpectrogram& mel, Batch<T>& x, int item) {
    if (mel.bands != x.ch || mel.frames != x.len) {
        throw ConfigError("mel_into_batch: shape mismatch");
    }
    for (int t = 0; t < mel.frames; ++t) {
        for (int c = 0; c < mel.bands; ++c) {
            x.at(item, c, t) = static_cast<T>(mel.at(t, c));
        }
    }
}

using EmbeddingVector = std::vector<float>;

// One mel spectrogram -> one 256-dim embedding. Inference phase is a pure
// function of (params, input); training phase applies seeded dropout and
// batch statistics over this single item.
EmbeddingVector forward_embed(SkeletonNet<float>& net,
                              const MelSpectrogram& mel, Phase phase,
                              std::uint64_t dropout_seed);

// softmax(head . embedding + bias) at inference.
std::vector<float> forward_classify(SkeletonNet<float>& net,
                                    ClassifierHead<float>& head,
                                    const MelSpectrogram& mel);

}  // namespace m2m
