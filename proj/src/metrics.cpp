#include "gshdl/metrics.hpp"

#include "gshdl/error.hpp"
#include "gshdl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gshdl {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0)
{
    if (num_classes == 0) throw Error(ErrorKind::config, "confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const LabelGrid& prediction, const LabelGrid& truth)
{
    if (prediction.height != truth.height || prediction.width != truth.width ||
        prediction.labels.size() != truth.labels.size()) {
        throw Error(ErrorKind::data, "prediction and truth sizes differ");
    }
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
        const int t = truth.labels[i];
        if (t < 0) continue;
        const int p = prediction.labels[i];
        if (static_cast<std::size_t>(t) >= n_ || p < 0 || static_cast<std::size_t>(p) >= n_) {
            throw Error(ErrorKind::data, "label outside the class range");
        }
        ++counts_[static_cast<std::size_t>(t) * n_ + static_cast<std::size_t>(p)];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other)
{
    if (other.n_ != n_) throw Error(ErrorKind::data, "confusion matrices have different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ClassAccuracy class_accuracy(const ConfusionMatrix& confusion)
{
    const std::size_t n = confusion.num_classes();
    ClassAccuracy out;
    out.per_class.assign(n, 0.0);
    out.present.assign(n, false);
    double sum = 0.0;
    std::size_t included = 0;
    for (std::size_t t = 0; t < n; ++t) {
        std::uint64_t total = 0;
        for (std::size_t p = 0; p < n; ++p) total += confusion.count(t, p);
        if (total == 0) continue;
        out.present[t] = true;
        out.per_class[t] = 100.0 * static_cast<double>(confusion.count(t, t)) / static_cast<double>(total);
        sum += out.per_class[t];
        ++included;
    }
    out.mean = included > 0 ? sum / static_cast<double>(included) : 0.0;
    return out;
}

ClassAccuracy per_class_pixel_accuracy(const LabelGrid& prediction, const LabelGrid& truth, std::size_t num_classes)
{
    ConfusionMatrix cm(num_classes);
    cm.add(prediction, truth);
    return class_accuracy(cm);
}

std::vector<Fold> make_folds(std::size_t num_items, std::size_t folds, const SplitFractions& fractions,
                             std::uint64_t seed)
{
    const std::array<double, 3> f{fractions.train, fractions.val, fractions.test};
    if (std::any_of(f.begin(), f.end(), [](double v) { return !(v >= 0.0); }) ||
        std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) {
        throw Error(ErrorKind::config, "split fractions must be non-negative and sum to 1");
    }
    if (folds == 0 || num_items < folds) throw Error(ErrorKind::config, "need at least as many items as folds");

    // Largest-remainder rounding; ties go to the earlier split.
    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = f[i] * static_cast<double>(num_items);
        sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        rem[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    while (assigned < num_items) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < 3; ++i) {
            if (rem[i] > rem[best] + 1e-12) best = i;
        }
        ++sizes[best];
        rem[best] = -1.0;
        ++assigned;
    }

    std::vector<Fold> out(folds);
    for (std::size_t k = 0; k < folds; ++k) {
        std::vector<std::size_t> order(num_items);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, k));
        std::shuffle(order.begin(), order.end(), rng.engine());
        auto first = order.begin();
        out[k].train.assign(first, first + static_cast<std::ptrdiff_t>(sizes[0]));
        first += static_cast<std::ptrdiff_t>(sizes[0]);
        out[k].val.assign(first, first + static_cast<std::ptrdiff_t>(sizes[1]));
        first += static_cast<std::ptrdiff_t>(sizes[1]);
        out[k].test.assign(first, order.end());
        std::sort(out[k].train.begin(), out[k].train.end());
        std::sort(out[k].val.begin(), out[k].val.end());
        std::sort(out[k].test.begin(), out[k].test.end());
    }
    return out;
}

std::vector<Fold> make_cv_folds(std::size_t num_items, std::size_t folds, std::uint64_t seed)
{
    if (folds < 2 || num_items < folds) throw Error(ErrorKind::config, "cross-validation needs 2 <= folds <= items");
    std::vector<std::size_t> order(num_items);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<Fold> out(folds);
    for (std::size_t i = 0; i < num_items; ++i) {
        const std::size_t block = i % folds;
        for (std::size_t k = 0; k < folds; ++k) {
            (k == block ? out[k].val : out[k].train).push_back(order[i]);
        }
    }
    for (Fold& f : out) {
        std::sort(f.train.begin(), f.train.end());
        std::sort(f.val.begin(), f.val.end());
    }
    return out;
}

} // namespace gshdl
