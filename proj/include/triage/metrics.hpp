#pragma once

// Per-class precision / recall / F from a confusion matrix.

#include <cstddef>
#include <string>
#include <vector>

namespace triage {

struct ClassMetrics {
    std::string name;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;    // true instances
    std::size_t predicted = 0;  // predicted instances
    bool zero_division = false; // no predicted positives; precision reported as 0
};

/// confusion[truth][predicted]
class Confusion {
public:
    explicit Confusion(std::vector<std::string> class_names);

    void add(std::size_t truth, std::size_t predicted);
    std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth][predicted]; }
    std::size_t total() const { return total_; }
    std::size_t classes() const { return names_.size(); }
    double accuracy() const;

    std::vector<ClassMetrics> per_class() const;

private:
    std::vector<std::string> names_;
    std::vector<std::vector<std::size_t>> counts_;
    std::size_t total_ = 0;
};

}  // namespace triage
