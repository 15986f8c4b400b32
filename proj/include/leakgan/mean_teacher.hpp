#pragma once

#include <cstdint>

#include "leakgan/discriminator.hpp"
#include "leakgan/patch_ops.hpp"

namespace leakgan {

/// Teacher discriminator: an exponential moving average of the student's
/// weights, queried on noise-perturbed inputs with the leak switched off.
template <typename T>
struct TeacherState {
    UNet<T> net;
    double alpha = 0.99;
    std::uint64_t step = 0;
    double noise_lambda = 0.1;

    static void validate(double alpha, double noise_lambda) {
        if (!(alpha >= 0.9 && alpha <= 0.999)) {
            throw ConfigError("ema alpha must lie in [0.9, 0.999], got " + std::to_string(alpha));
        }
        if (!(noise_lambda > 0.0 && noise_lambda < 1.0)) {
            throw ConfigError("noise lambda must lie in (0, 1), got " + std::to_string(noise_lambda));
        }
    }
};

/// Teacher starts as an exact copy of the student.
template <typename T>
TeacherState<T> make_teacher(UNet<T>& student, double alpha, double noise_lambda) {
    TeacherState<T>::validate(alpha, noise_lambda);
    TeacherState<T> t;
    t.net = UNet<T>(student.in_channels(), student.width(), student.num_classes(), student.leak_channels());
    t.net.copy_weights_from(student);
    t.alpha = alpha;
    t.noise_lambda = noise_lambda;
    return t;
}

/// p_t <- alpha * p_t + (1 - alpha) * p_s for every parameter.
template <typename T>
void ema_update(TeacherState<T>& teacher, UNet<T>& student) {
    auto dst = teacher.net.parameters();
    auto src = student.parameters();
    if (dst.size() != src.size()) throw NumericError("ema_update: teacher/student parameter count mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (!dst[i]->value.same_shape(src[i]->value)) {
            throw NumericError("ema_update: shape mismatch for " + dst[i]->name);
        }
    }
    const T a = static_cast<T>(teacher.alpha);
    const T b = T(1) - a;
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto& t = dst[i]->value.values();
        const auto& s = src[i]->value.values();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = a * t[k] + b * s[k];
    }
    ++teacher.step;
}

/// Teacher posteriors (B, K+1, 64, 64) on x_ul + lambda * eps. No gradient
/// is recorded and the leak module is never used.
template <typename T>
Tensor<T> teacher_predict(const TeacherState<T>& teacher, const PatchBatch<T>& x_ul, std::uint64_t seed) {
    if (!teacher.net.initialized()) throw NumericError("teacher_predict: teacher is not initialized");
    const auto noised = add_input_noise(x_ul, teacher.noise_lambda, seed);
    const LeakConfig off{};
    auto pass = teacher.net.forward(noised.pixels, nullptr, off);
    return class_probabilities(pass.out);
}

}  // namespace leakgan
