#pragma once

#include "gshdl/grid.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace gshdl {

/// Rows are true labels, columns predictions. Void truth pixels are skipped.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(std::size_t num_classes);

    void add(const LabelGrid& prediction, const LabelGrid& truth);
    void merge(const ConfusionMatrix& other);
    [[nodiscard]] std::size_t num_classes() const noexcept { return n_; }
    [[nodiscard]] std::uint64_t count(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }

  private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

struct ClassAccuracy {
    /// Percent correct per class; classes absent from the truth hold 0 and
    /// are marked in `present`.
    std::vector<double> per_class;
    std::vector<bool> present;
    /// Mean over present classes, in percent.
    double mean = 0.0;
};

[[nodiscard]] ClassAccuracy class_accuracy(const ConfusionMatrix& confusion);
[[nodiscard]] ClassAccuracy per_class_pixel_accuracy(const LabelGrid& prediction, const LabelGrid& truth,
                                                     std::size_t num_classes);

struct SplitFractions {
    double train = 0.45;
    double val = 0.15;
    double test = 0.40;

    friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Independent random train/val/test partitions, one per fold. Split sizes
/// are rounded by largest remainder so they always sum to `num_items`.
[[nodiscard]] std::vector<Fold> make_folds(std::size_t num_items, std::size_t folds, const SplitFractions& fractions,
                                           std::uint64_t seed);

/// k disjoint, near-equal validation blocks for cross-validation; the
/// remaining items of each round form its training part.
[[nodiscard]] std::vector<Fold> make_cv_folds(std::size_t num_items, std::size_t folds, std::uint64_t seed);

} // namespace gshdl
