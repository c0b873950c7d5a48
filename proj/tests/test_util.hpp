#pragma once

#include <string>
#include <vector>

#include "lwaft/model.hpp"
#include "lwaft/rng.hpp"
#include "lwaft/vocab.hpp"

namespace lwaft::testing {

/// prompt + answer + end token; targets cover the answer and the end token.
inline TokenSequence make_sequence(const std::string& prompt, const std::string& answer) {
    TokenSequence s;
    s.tokens = vocab::encode(prompt + answer);
    s.tokens.push_back(vocab::end);
    s.target.assign(s.tokens.size(), 0);
    for (std::size_t t = prompt.size(); t < s.tokens.size(); ++t) {
        s.target[t] = 1;
    }
    return s;
}

inline ModelSpec small_transducer(int dim = 16, int layers = 2, int heads = 4, int context = 24,
                                  std::uint64_t seed = 7) {
    ModelSpec spec;
    spec.model_dim = dim;
    spec.num_layers = layers;
    spec.num_heads = heads;
    spec.context_len = context;
    spec.seed = seed;
    return spec;
}

inline Batch random_token_batch(const ModelSpec& spec, std::size_t count, std::size_t length, std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    for (std::size_t i = 0; i < count; ++i) {
        TokenSequence s;
        for (std::size_t t = 0; t < length; ++t) {
            s.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size))));
            s.target.push_back(t >= length / 2 ? 1 : 0);
        }
        b.sequences.push_back(std::move(s));
    }
    return b;
}

/// Linearly separable two-class set: label = [w.x > 0], points within `margin`
/// of the boundary rejected.
inline Batch separable_dense(std::size_t count, int dim, double margin, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(static_cast<std::size_t>(dim));
    for (auto& x : w) {
        x = rng.normal();
    }
    double norm = 0.0;
    for (double x : w) {
        norm += x * x;
    }
    norm = std::sqrt(norm);
    Batch b;
    while (b.dense.size() < count) {
        DenseExample ex;
        double s = 0.0;
        for (int i = 0; i < dim; ++i) {
            ex.features.push_back(rng.uniform(-1.0, 1.0));
            s += ex.features.back() * w[static_cast<std::size_t>(i)];
        }
        if (std::abs(s) / norm < margin) {
            continue;
        }
        ex.label = s > 0.0 ? 1 : 0;
        b.dense.push_back(std::move(ex));
    }
    return b;
}

} // namespace lwaft::testing
