#ifndef PEFTPROF_TOY_GEN_HPP
#define PEFTPROF_TOY_GEN_HPP

#include <random>

#include "peftprof/builders.hpp"

namespace peftprof {

namespace detail {

inline Activation random_act(std::mt19937_64& rng) {
    static constexpr Activation acts[] = {Activation::relu, Activation::relu6, Activation::hardswish, Activation::hardsigmoid};
    return acts[std::uniform_int_distribution<int>(0, 3)(rng)];
}

}  // namespace detail

/// Random valid toy CNN covering every layer kind: conv (dense, strided,
/// depthwise, biased), BN, all activations, residual adds, squeeze-excite,
/// max pool, global pool, flatten and linear heads.
inline ToyCnnSpec random_toy_spec(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    ToyCnnSpec s;
    s.in_channels = pick(1, 3);
    s.height = s.width = 4 * pick(2, 3);
    std::int64_t c = 4 * pick(1, 2);
    std::int64_t hw = s.height;
    s.layers.push_back(ToyLayer::conv(c, 3, 1, -1, 1, pick(0, 1) == 1));
    s.layers.push_back(ToyLayer::bn());
    s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
    const int blocks = pick(2, 4);
    for (int b = 0; b < blocks; ++b) {
        switch (pick(0, 4)) {
            case 0: {  // plain conv, maybe strided
                std::int64_t stride = (hw >= 8 && pick(0, 1)) ? 2 : 1;
                std::int64_t k = pick(0, 1) ? 3 : 1;
                std::int64_t out = 4 * pick(1, 3);
                s.layers.push_back(ToyLayer::conv(out, k, stride, -1, 1, pick(0, 1) == 1));
                s.layers.push_back(ToyLayer::bn());
                s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
                c = out;
                hw = (hw + 2 * (k / 2) - k) / stride + 1;
                break;
            }
            case 1: {  // depthwise separable
                s.layers.push_back(ToyLayer::depthwise(3, 1));
                s.layers.push_back(ToyLayer::bn());
                s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
                std::int64_t out = 4 * pick(1, 3);
                s.layers.push_back(ToyLayer::conv(out, 1));
                s.layers.push_back(ToyLayer::bn());
                c = out;
                break;
            }
            case 2:  // residual
                s.layers.push_back(ToyLayer::conv(c, 3));
                s.layers.push_back(ToyLayer::bn());
                s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
                s.layers.push_back(ToyLayer::conv(c, 3));
                s.layers.push_back(ToyLayer::bn());
                s.layers.push_back(ToyLayer::add(5));
                s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
                break;
            case 3:  // squeeze-excite
                s.layers.push_back(ToyLayer::se(2));
                break;
            case 4:  // grouped conv with two groups, or max pool
                if (hw >= 4 && pick(0, 1)) {
                    s.layers.push_back(ToyLayer::maxpool(2, 2));
                    hw /= 2;
                } else {
                    s.layers.push_back(ToyLayer::conv(c, 3, 1, -1, 2));
                    s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
                }
                break;
        }
    }
    switch (pick(0, 2)) {
        case 0:
            s.layers.push_back(ToyLayer::avgpool());
            s.layers.push_back(ToyLayer::flatten());
            s.layers.push_back(ToyLayer::linear());
            break;
        case 1:
            s.layers.push_back(ToyLayer::flatten());
            s.layers.push_back(ToyLayer::linear());
            break;
        default:
            s.layers.push_back(ToyLayer::avgpool());
            s.layers.push_back(ToyLayer::linear(8));
            s.layers.push_back(ToyLayer::act(detail::random_act(rng)));
            s.layers.push_back(ToyLayer::linear());
            break;
    }
    return s;
}

}  // namespace peftprof

#endif  // PEFTPROF_TOY_GEN_HPP
