#ifndef PEFTPROF_TRAIN_HPP
#define PEFTPROF_TRAIN_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "peftprof/builders.hpp"
#include "peftprof/optim.hpp"

namespace peftprof {

struct Batch {
    Tensor x;
    std::vector<int> labels;
};

using Dataset = std::vector<Batch>;

/// Two classes of unit-noise images separated by per-channel means: class 1
/// shifts channel c by +contrast for even c and -contrast for odd c, class 0
/// by the opposite sign.
inline Dataset synthetic_two_class(const TensorShape& sample, std::int64_t batches, std::int64_t batch_size,
                                   std::uint64_t seed, double contrast = 1.0) {
    if (batches < 1 || batch_size < 1) throw ValidationError("dataset needs at least one sample");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    Dataset ds;
    for (std::int64_t b = 0; b < batches; ++b) {
        Batch batch{Tensor({batch_size, sample.c, sample.h, sample.w}), {}};
        for (std::int64_t n = 0; n < batch_size; ++n) {
            const int y = coin(rng) ? 1 : 0;
            batch.labels.push_back(y);
            for (std::int64_t c = 0; c < sample.c; ++c)
                for (std::int64_t h = 0; h < sample.h; ++h)
                    for (std::int64_t w = 0; w < sample.w; ++w) {
                        const double mean = ((c % 2 == 0) == (y == 1)) ? contrast : -contrast;
                        batch.x.at(n, c, h, w) = mean + noise(rng);
                    }
        }
        ds.push_back(std::move(batch));
    }
    return ds;
}

/// Small separable-conv classifier used by the training checks: 3x8x8 input,
/// conv/bn/relu, depthwise/bn/relu6, pointwise/bn/hardswish, pool, linear head.
inline ToyCnnSpec toy_classifier_spec() {
    ToyCnnSpec s;
    s.height = s.width = 8;
    s.layers = {ToyLayer::conv(8),    ToyLayer::bn(), ToyLayer::act(Activation::relu),      ToyLayer::depthwise(),
                ToyLayer::bn(),       ToyLayer::act(Activation::relu6), ToyLayer::conv(8, 1), ToyLayer::bn(),
                ToyLayer::act(Activation::hardswish), ToyLayer::avgpool(), ToyLayer::flatten(), ToyLayer::linear()};
    return s;
}

/// Mean cross-entropy over the dataset, evaluated on a copy so BN running
/// statistics of `ex` are untouched.
inline double dataset_loss(const Executable& ex, const Dataset& data) {
    Executable copy = ex;
    double sum = 0.0;
    for (const auto& b : data) sum += softmax_cross_entropy(forward(copy, b.x).output, b.labels).loss;
    return sum / static_cast<double>(data.size());
}

/// Trains in place for `epochs` passes, one optimizer step per batch. Entry 0
/// of the result is the loss before training, entry e the loss after epoch e.
inline std::vector<double> train_toy(Executable& ex, const Dataset& data, const OptimizerPlan& plan, int epochs) {
    if (data.empty()) throw ValidationError("train_toy needs a nonempty dataset");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
    OptimizerState st = make_optimizer(plan);
    std::vector<double> curve{dataset_loss(ex, data)};
    for (int e = 0; e < epochs; ++e) {
        for (const auto& b : data) {
            auto fw = forward(ex, b.x);
            auto loss = softmax_cross_entropy(fw.output, b.labels);
            auto grads = backward(ex, fw.tape, loss.grad);
            step(st, ex, grads, fw.tape.ops, fw.tape.ledger);
        }
        curve.push_back(dataset_loss(ex, data));
    }
    return curve;
}

}  // namespace peftprof

#endif  // PEFTPROF_TRAIN_HPP
