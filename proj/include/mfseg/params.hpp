#pragma once

// Named parameters, optimizer state, learning-rate schedule and checkpoints.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mfseg/autodiff.hpp"

namespace mfseg {

struct Param {
    Array value;
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment
};

/// Ordered by name so iteration (and therefore checkpoints and updates) is deterministic.
class ParamSet {
public:
    void add(const std::string& name, Array value) {
        if (params_.count(name)) throw std::invalid_argument("parameter '" + name + "' registered twice");
        const std::size_t n = value.size();
        params_.emplace(name, Param{std::move(value), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    std::size_t size() const { return params_.size(); }
    bool empty() const { return params_.empty(); }

    const Array& at(const std::string& name) const { return find(name).value; }
    Array& at(const std::string& name) { return const_cast<Param&>(std::as_const(*this).find(name)).value; }
    const Param& param(const std::string& name) const { return find(name); }
    Param& param(const std::string& name) { return const_cast<Param&>(std::as_const(*this).find(name)); }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value.size();
        return n;
    }

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    void reset_optimizer() {
        step_ = 0;
        for (auto& [_, p] : params_) {
            std::fill(p.m.begin(), p.m.end(), 0.0);
            std::fill(p.v.begin(), p.v.end(), 0.0);
        }
    }

    /// Values only; optimizer state is ignored.
    bool same_values(const ParamSet& other) const {
        if (params_.size() != other.params_.size()) return false;
        for (const auto& [name, p] : params_) {
            auto it = other.params_.find(name);
            if (it == other.params_.end() || !(it->second.value == p.value)) return false;
        }
        return true;
    }

private:
    const Param& find(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Param> params_;
    std::uint64_t step_ = 0;
};

/// Parameters as tape values, keyed by name. Either bound variables or constants.
class ParamView {
public:
    const Value& operator[](const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw std::out_of_range("parameter '" + name + "' not in view");
        return it->second;
    }
    bool contains(const std::string& name) const { return values_.count(name) > 0; }
    void set(const std::string& name, Value v) { values_[name] = std::move(v); }
    auto begin() const { return values_.begin(); }
    auto end() const { return values_.end(); }

private:
    std::map<std::string, Value> values_;
};

/// Constant view: usable on any tape, never receives gradients.
inline ParamView constant_view(const ParamSet& params) {
    ParamView view;
    for (const auto& [name, p] : params) view.set(name, Value(p.value));
    return view;
}

/// Binds every parameter whose name starts with one of `prefixes` as a tape
/// variable; the rest become constants. An empty prefix list binds everything.
inline ParamView bind(Tape& tape, const ParamSet& params, const std::vector<std::string>& prefixes = {}) {
    ParamView view;
    for (const auto& [name, p] : params) {
        bool trainable = prefixes.empty();
        for (const auto& pre : prefixes) trainable = trainable || name.rfind(pre, 0) == 0;
        view.set(name, trainable ? tape.variable(p.value) : Value(p.value));
    }
    return view;
}

using Gradients = std::map<std::string, std::vector<double>>;

/// Gradients of the last backward pass for every bound (non-constant) parameter.
inline Gradients collect_gradients(const Tape& tape, const ParamView& view) {
    Gradients grads;
    for (const auto& [name, v] : view)
        if (!v.is_constant()) grads.emplace(name, tape.grad(v));
    return grads;
}

/// Kaiming-style uniform initialization for a dense layer: W ~ U(-sqrt(6/fan_in), +),
/// b ~ U(-1/sqrt(fan_in), +).
inline void add_linear(ParamSet& params, const std::string& prefix, std::size_t fan_in, std::size_t fan_out,
                       std::mt19937_64& rng) {
    const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> wd(-wb, wb), bd(-bb, bb);
    Array w({fan_in, fan_out});
    for (double& x : w.data) x = wd(rng);
    Array b({fan_out});
    for (double& x : b.data) x = bd(rng);
    params.add(prefix + ".weight", std::move(w));
    params.add(prefix + ".bias", std::move(b));
}

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.005;
};

/// Decoupled-weight-decay Adam update over the parameters named in `grads`.
/// Every gradient key must name a parameter and every gradient must match its shape.
inline void adamw_step(ParamSet& params, const Gradients& grads, double lr, const AdamWOptions& opt = {}) {
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) throw std::out_of_range("gradient for unknown parameter '" + name + "'");
        if (g.size() != params.at(name).size())
            throw DimensionError("gradient for '" + name + "' has " + std::to_string(g.size()) + " elements");
    }
    params.set_step(params.step() + 1);
    const double t = static_cast<double>(params.step());
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (const auto& [name, g] : grads) {
        Param& p = params.param(name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            double& w = p.value.data[i];
            w -= lr * opt.weight_decay * w;
            p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
            p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            const double mh = p.m[i] / c1, vh = p.v[i] / c2;
            w -= lr * mh / (std::sqrt(vh) + opt.eps);
        }
    }
}

/// Fixed shape of the one-cycle schedule.
struct OneCycle {
    static constexpr double kWarmupFraction = 0.1;
    static constexpr double kStartDivisor = 25.0;
    static constexpr double kFinalDivisor = 1000.0;
};

/// Linear warmup from max_lr/25 over the first 10% of steps, then cosine decay to max_lr/1000.
inline double one_cycle_lr(std::size_t step, std::size_t total_steps, double max_lr) {
    if (total_steps < 1) throw std::invalid_argument("one_cycle_lr: total_steps must be >= 1");
    if (step > total_steps)
        throw std::out_of_range("one_cycle_lr: step " + std::to_string(step) + " exceeds " +
                                std::to_string(total_steps));
    const double start = max_lr / OneCycle::kStartDivisor;
    const double final_lr = max_lr / OneCycle::kFinalDivisor;
    const double s = static_cast<double>(step);
    const double warm = OneCycle::kWarmupFraction * static_cast<double>(total_steps);
    if (s < warm) return start + (max_lr - start) * (s / warm);
    if (s == warm) return max_lr;
    const double progress = (s - warm) / (static_cast<double>(total_steps) - warm);
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Checkpoint file: "MFSEGCKP", u32 version, then until EOF per parameter:
// u64 name length, UTF-8 name, u64 rank, rank x u64 dims, little-endian f64 data.

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'F', 'S', 'E', 'G', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace detail

inline void save_checkpoint(const ParamSet& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    for (const auto& [name, p] : params) {
        detail::write_pod<std::uint64_t>(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint64_t>(os, p.value.shape.size());
        for (auto d : p.value.shape) detail::write_pod<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(p.value.data.data()),
                 static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write to '" + path + "' failed");
}

inline ParamSet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw CheckpointError("'" + path + "' is not an MFSEGCKP checkpoint");
    std::uint32_t version = 0;
    if (!detail::read_pod(is, version)) throw CheckpointError("truncated checkpoint header");
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    ParamSet params;
    constexpr std::uint64_t kMaxName = 1 << 16, kMaxRank = 8;
    while (is.peek() != std::char_traits<char>::eof()) {
        std::uint64_t len = 0, rank = 0;
        if (!detail::read_pod(is, len) || len > kMaxName) throw CheckpointError("corrupt parameter record");
        std::string name(len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated name");
        if (!detail::read_pod(is, rank) || rank > kMaxRank) throw CheckpointError("corrupt rank for '" + name + "'");
        Shape shape(rank);
        for (auto& d : shape) {
            std::uint64_t dim = 0;
            if (!detail::read_pod(is, dim)) throw CheckpointError("truncated shape for '" + name + "'");
            d = dim;
        }
        Array a(shape);
        if (!is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.size() * sizeof(double))))
            throw CheckpointError("truncated data for '" + name + "'");
        params.add(name, std::move(a));
    }
    return params;
}

}  // namespace mfseg
