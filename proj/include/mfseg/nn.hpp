#pragma once

#include <random>
#include <string>
#include <vector>

#include "mfseg/ops.hpp"
#include "mfseg/params.hpp"

namespace mfseg::nn {

/// Registers a fully connected stack `prefix.{0..L-1}` with layer widths `dims`
/// (dims[0] is the input width).
inline void add_mlp(ParamSet& params, const std::string& prefix, const std::vector<std::size_t>& dims,
                    std::mt19937_64& rng) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        add_linear(params, prefix + "." + std::to_string(i), dims[i], dims[i + 1], rng);
}

/// Linear layers with ReLU between them (none after the last).
inline Value mlp(Tape& t, const ParamView& params, const std::string& prefix, std::size_t layers, Value x) {
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string p = prefix + "." + std::to_string(i);
        x = ops::linear(t, x, params[p + ".weight"], params[p + ".bias"]);
        if (i + 1 < layers) x = ops::relu(t, x);
    }
    return x;
}

}  // namespace mfseg::nn
