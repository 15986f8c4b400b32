#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "leakgan/discriminator.hpp"
#include "leakgan/error.hpp"
#include "leakgan/types.hpp"

namespace leakgan {

/// Probabilities are clamped to at least this before taking logarithms.
inline constexpr double kProbEpsilon = 1e-12;

struct LossWeights {
    double lambda1 = 1.0;  // supervised
    double lambda2 = 1.0;  // unsupervised GAN
    double lambda3 = 0.1;  // consistency
    double focal_alpha_t = 2.0;
    double focal_rho = 0.25;

    void validate() const {
        if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0)) {
            throw ConfigError("loss weights lambda1..3 must be >= 0");
        }
        if (!(focal_alpha_t > 0)) throw ConfigError("focal_alpha_t must be > 0");
        if (!(focal_rho >= 0)) throw ConfigError("focal_rho must be >= 0");
    }
};

struct LossBundle {
    double sup = 0, unsup = 0, cons = 0, total = 0, gen_adv = 0;
    std::map<std::string, double> diagnostics;
};

namespace detail {

template <typename T>
T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Per-pixel visitor over K logits: calls f(pixel_index, logits_ptr, stride).
template <typename T, typename F>
void for_each_pixel(const Tensor<T>& logits, F&& f) {
    const std::size_t k = logits.c(), plane = logits.plane_size();
    for (std::size_t i = 0; i < logits.n(); ++i) {
        for (std::size_t px = 0; px < plane; ++px) f(i, px, logits.data() + i * k * plane + px, plane);
    }
}

template <typename T>
void prepare_grad(Tensor<T>* grad, const Tensor<T>& like) {
    if (grad && !grad->same_shape(like)) *grad = Tensor<T>(like.shape());
}

}  // namespace detail

/// Cross-entropy on the K-class posterior p(y | x, y < K+1), averaged over
/// pixels. With `focal`, each pixel term is scaled by alpha_t (1 - p_t)^rho.
/// Optionally accumulates dL/dlogits into `grad`.
template <typename T>
T supervised_loss(const SegLogits<T>& s, const LabelMaskBatch& y, const LossWeights& w, bool focal,
                  Tensor<T>* grad = nullptr) {
    const auto& l = s.logits;
    const std::size_t k = l.c(), plane = l.plane_size();
    if (y.batch != l.n() || y.height != l.h() || y.width != l.w()) {
        throw DataError("supervised_loss: label batch does not match logits " + l.shape_string());
    }
    if (y.batch == 0) throw ConfigError("supervised_loss: empty labelled batch");
    const double count = static_cast<double>(l.n() * plane);
    const double alpha = focal ? w.focal_alpha_t : 1.0;
    const double rho = focal ? w.focal_rho : 0.0;
    const double max_nll = -std::log(kProbEpsilon);
    detail::prepare_grad(grad, l);
    std::vector<double> p(k);
    double total = 0.0;
    for (std::size_t i = 0; i < l.n(); ++i) {
        for (std::size_t px = 0; px < plane; ++px) {
            const std::uint8_t t = y.classes[i * plane + px];
            if (t >= k) {
                throw DataError("supervised_loss: label " + std::to_string(int(t)) + " >= K=" + std::to_string(k));
            }
            const T* src = l.data() + i * k * plane + px;
            const double lse = static_cast<double>(log_sum_exp(src, k, plane));
            for (std::size_t c = 0; c < k; ++c) p[c] = std::exp(static_cast<double>(src[c * plane]) - lse);
            double nll = lse - static_cast<double>(src[t * plane]);
            const bool clamped = nll > max_nll;
            if (clamped) nll = max_nll;
            const double u = 1.0 - p[t];
            const double mod = rho == 0.0 ? 1.0 : std::pow(u, rho);
            total += alpha * mod * nll;
            if (!grad || clamped) continue;
            T* g = grad->data() + i * k * plane + px;
            for (std::size_t c = 0; c < k; ++c) {
                const double ind = c == t ? 1.0 : 0.0;
                // d(nll)/dl_c = p_c - [c == t]
                double d = mod * (p[c] - ind);
                if (rho != 0.0 && u > 0.0) {
                    // d(u^rho)/dl_c = -rho u^(rho-1) p_t ([c == t] - p_c)
                    const double du = c == t ? -p[t] * u : p[t] * p[c];
                    d += rho * std::pow(u, rho - 1.0) * du * nll;
                }
                g[c * plane] += static_cast<T>(alpha * d / count);
            }
        }
    }
    return static_cast<T>(total / count);
}

/// -E log D(x_ul) - E log(1 - D(x_f)), each expectation a per-pixel mean,
/// in log-sum-exp form. Gradients w.r.t. each logit batch are optional.
template <typename T>
T unsupervised_loss(const SegLogits<T>& real, const SegLogits<T>& fake, Tensor<T>* grad_real = nullptr,
                    Tensor<T>* grad_fake = nullptr) {
    if (real.logits.empty() || fake.logits.empty()) {
        throw NumericError("unsupervised_loss: empty logit batch");
    }
    const double max_nll = -std::log(kProbEpsilon);
    const std::size_t k = real.logits.c();
    auto term = [&](const Tensor<T>& l, bool is_real, Tensor<T>* grad) {
        const double count = static_cast<double>(l.n() * l.plane_size());
        detail::prepare_grad(grad, l);
        double acc = 0.0;
        detail::for_each_pixel(l, [&](std::size_t i, std::size_t px, const T* src, std::size_t stride) {
            const double lse = static_cast<double>(log_sum_exp(src, k, stride));
            // -log D = softplus(-lse), -log(1 - D) = softplus(lse)
            double v = detail::softplus(is_real ? -lse : lse);
            const bool clamped = v > max_nll;
            if (clamped) v = max_nll;
            acc += v;
            if (!grad || clamped) return;
            const double d = sigmoid(lse);
            const double scale = is_real ? -(1.0 - d) : d;
            T* g = grad->data() + i * k * l.plane_size() + px;
            for (std::size_t c = 0; c < k; ++c) {
                const double pc = std::exp(static_cast<double>(src[c * stride]) - lse);
                g[c * stride] += static_cast<T>(scale * pc / count);
            }
        });
        return acc / count;
    };
    return static_cast<T>(term(real.logits, true, grad_real) + term(fake.logits, false, grad_fake));
}

/// E log(1 - D(G(z))), minimized by the generator.
template <typename T>
T generator_adversarial_loss(const SegLogits<T>& fake, Tensor<T>* grad = nullptr) {
    const auto& l = fake.logits;
    if (l.empty()) throw NumericError("generator_adversarial_loss: empty logit batch");
    const std::size_t k = l.c();
    const double count = static_cast<double>(l.n() * l.plane_size());
    const double min_log = std::log(kProbEpsilon);
    detail::prepare_grad(grad, l);
    double acc = 0.0;
    detail::for_each_pixel(l, [&](std::size_t i, std::size_t px, const T* src, std::size_t stride) {
        const double lse = static_cast<double>(log_sum_exp(src, k, stride));
        double v = -detail::softplus(lse);
        const bool clamped = v < min_log;
        if (clamped) v = min_log;
        acc += v;
        if (!grad || clamped) return;
        const double d = sigmoid(lse);
        T* g = grad->data() + i * k * l.plane_size() + px;
        for (std::size_t c = 0; c < k; ++c) {
            const double pc = std::exp(static_cast<double>(src[c * stride]) - lse);
            g[c * stride] += static_cast<T>(-d * pc / count);
        }
    });
    return static_cast<T>(acc / count);
}

/// Chain rule through the K+1 softmax with the fake logit fixed at 0:
/// dL/dl_i = p_i (dL/dp_i - sum_j p_j dL/dp_j) for the K free logits.
template <typename T>
void posterior_backward(const Tensor<T>& probs, const Tensor<T>& d_probs, Tensor<T>& d_logits) {
    const std::size_t k1 = probs.c(), k = k1 - 1, plane = probs.plane_size();
    if (!d_logits.same_shape(Tensor<T>(probs.n(), k, probs.h(), probs.w()))) {
        d_logits = Tensor<T>(probs.n(), k, probs.h(), probs.w());
    }
    for (std::size_t i = 0; i < probs.n(); ++i) {
        const T* p = probs.data() + i * k1 * plane;
        const T* dp = d_probs.data() + i * k1 * plane;
        T* dl = d_logits.data() + i * k * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            T dot = T(0);
            for (std::size_t c = 0; c < k1; ++c) dot += p[c * plane + px] * dp[c * plane + px];
            for (std::size_t c = 0; c < k; ++c) {
                dl[c * plane + px] += p[c * plane + px] * (dp[c * plane + px] - dot);
            }
        }
    }
}

/// Mean squared difference of per-pixel posterior vectors (mean over
/// pixels and channels). Gradient w.r.t. the student posteriors only.
template <typename T>
T mse_consistency(const Tensor<T>& p_student, const Tensor<T>& p_teacher, Tensor<T>* grad = nullptr) {
    p_student.require_same_shape(p_teacher, "mse_consistency");
    const double count = static_cast<double>(p_student.size());
    detail::prepare_grad(grad, p_student);
    double acc = 0.0;
    for (std::size_t k = 0; k < p_student.size(); ++k) {
        const double d = static_cast<double>(p_student[k]) - static_cast<double>(p_teacher[k]);
        acc += d * d;
        if (grad) (*grad)[k] += static_cast<T>(2.0 * d / count);
    }
    return static_cast<T>(acc / count);
}

/// Focal consistency: per channel alpha_t |p - q|^rho |log p - log q|,
/// summed over the K+1 channels and averaged over pixels. Gradient w.r.t.
/// the student posteriors `p_student` only.
template <typename T>
T focal_consistency(const Tensor<T>& p_student, const Tensor<T>& p_teacher, const LossWeights& w,
                    Tensor<T>* grad = nullptr) {
    p_student.require_same_shape(p_teacher, "focal_consistency");
    const double pixels = static_cast<double>(p_student.n() * p_student.plane_size());
    const double alpha = w.focal_alpha_t, rho = w.focal_rho;
    detail::prepare_grad(grad, p_student);
    double acc = 0.0;
    for (std::size_t k = 0; k < p_student.size(); ++k) {
        const double praw = static_cast<double>(p_student[k]);
        const double p = std::clamp(praw, kProbEpsilon, 1.0);
        const double q = std::clamp(static_cast<double>(p_teacher[k]), kProbEpsilon, 1.0);
        const double gap = std::abs(p - q);
        if (gap == 0.0) continue;
        const double logd = std::log(p) - std::log(q);
        const double mod = rho == 0.0 ? 1.0 : std::pow(gap, rho);
        acc += alpha * mod * std::abs(logd);
        if (!grad || praw != p) continue;
        const double sgn = p > q ? 1.0 : -1.0;  // sign(p - q) == sign(log p - log q)
        double d = mod * sgn / p;
        if (rho != 0.0) d += rho * std::pow(gap, rho - 1.0) * sgn * std::abs(logd);
        (*grad)[k] += static_cast<T>(alpha * d / pixels);
    }
    return static_cast<T>(acc / pixels);
}

/// Squared L2 distance between batch-mean bottleneck features.
template <typename T>
T feature_matching_loss(const EncoderFeatures<T>& real, const EncoderFeatures<T>& fake,
                        Tensor<T>* grad_fake = nullptr) {
    const auto& r = real.bottleneck;
    const auto& f = fake.bottleneck;
    if (r.sample_size() != f.sample_size() || r.c() != f.c() || r.n() == 0 || f.n() == 0) {
        throw NumericError("feature_matching_loss: bottleneck shape mismatch " + r.shape_string() + " vs " +
                           f.shape_string());
    }
    const std::size_t dim = r.sample_size();
    auto batch_mean = [dim](const Tensor<T>& t) {
        std::vector<double> m(dim, 0.0);
        for (std::size_t i = 0; i < t.n(); ++i) {
            for (std::size_t j = 0; j < dim; ++j) m[j] += static_cast<double>(t[i * dim + j]);
        }
        for (auto& v : m) v /= static_cast<double>(t.n());
        return m;
    };
    std::vector<double> diff = batch_mean(r);
    const std::vector<double> fake_mean = batch_mean(f);
    for (std::size_t j = 0; j < dim; ++j) diff[j] -= fake_mean[j];
    double acc = 0.0;
    for (double d : diff) acc += d * d;
    if (grad_fake) {
        detail::prepare_grad(grad_fake, f);
        for (std::size_t i = 0; i < f.n(); ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                (*grad_fake)[i * dim + j] += static_cast<T>(-2.0 * diff[j] / static_cast<double>(f.n()));
            }
        }
    }
    return static_cast<T>(acc);
}

/// Weighted discriminator objective lambda1*sup + lambda2*unsup + lambda3*cons.
/// `lambda3_scale` carries the consistency ramp-up.
inline LossBundle total_discriminator_loss(double sup, double unsup, double cons, const LossWeights& w,
                                           double lambda3_scale = 1.0) {
    const std::pair<const char*, double> parts[] = {{"sup", sup}, {"unsup", unsup}, {"cons", cons}};
    for (const auto& [name, v] : parts) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term: ") + name);
    }
    LossBundle b;
    b.sup = sup;
    b.unsup = unsup;
    b.cons = cons;
    b.total = w.lambda1 * sup + w.lambda2 * unsup + w.lambda3 * lambda3_scale * cons;
    return b;
}

}  // namespace leakgan
