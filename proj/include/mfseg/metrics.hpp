#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfseg {

/// rows = ground truth, cols = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const { return c_; }

    void add(std::size_t truth, std::size_t pred, std::uint64_t n = 1) {
        if (truth >= c_ || pred >= c_) throw std::out_of_range("confusion matrix: class index out of range");
        counts_[truth * c_ + pred] += n;
    }

    void add(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
        if (truth.size() != pred.size()) throw std::invalid_argument("confusion matrix: length mismatch");
        for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], pred[i]);
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.c_ != c_) throw std::invalid_argument("confusion matrix: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * c_ + pred]; }

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto v : counts_) s += v;
        return s;
    }

    std::uint64_t truth_count(std::size_t c) const {
        std::uint64_t s = 0;
        for (std::size_t p = 0; p < c_; ++p) s += at(c, p);
        return s;
    }

    std::uint64_t pred_count(std::size_t c) const {
        std::uint64_t s = 0;
        for (std::size_t t = 0; t < c_; ++t) s += at(t, c);
        return s;
    }

    /// TP / (TP + FP + FN); nullopt when the class is absent from both truth and prediction.
    std::optional<double> iou(std::size_t c) const {
        const std::uint64_t tp = at(c, c);
        const std::uint64_t uni = truth_count(c) + pred_count(c) - tp;
        if (uni == 0) return std::nullopt;
        return static_cast<double>(tp) / static_cast<double>(uni);
    }

    /// Unweighted mean IoU over classes present in the ground truth.
    double miou() const { return mean_iou(all_classes()); }

    /// Mean IoU over the listed classes that occur in the ground truth.
    double mean_iou(const std::vector<std::size_t>& classes) const {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t c : classes) {
            if (c >= c_ || truth_count(c) == 0) continue;
            s += *iou(c);
            ++n;
        }
        return n ? s / static_cast<double>(n) : 0.0;
    }

    const std::vector<std::uint64_t>& counts() const { return counts_; }

private:
    std::vector<std::size_t> all_classes() const {
        std::vector<std::size_t> v(c_);
        for (std::size_t i = 0; i < c_; ++i) v[i] = i;
        return v;
    }

    std::size_t c_;
    std::vector<std::uint64_t> counts_;
};

}  // namespace mfseg
