#include "triage/metrics.hpp"

#include "triage/common.hpp"

namespace triage {

Confusion::Confusion(std::vector<std::string> class_names)
    : names_(std::move(class_names)), counts_(names_.size(), std::vector<std::size_t>(names_.size(), 0)) {}

void Confusion::add(std::size_t truth, std::size_t predicted) {
    if (truth >= names_.size() || predicted >= names_.size()) throw ValidationError("confusion class out of range");
    ++counts_[truth][predicted];
    ++total_;
}

double Confusion::accuracy() const {
    if (total_ == 0) return 0.0;
    std::size_t hit = 0;
    for (std::size_t c = 0; c < names_.size(); ++c) hit += counts_[c][c];
    return static_cast<double>(hit) / static_cast<double>(total_);
}

std::vector<ClassMetrics> Confusion::per_class() const {
    std::vector<ClassMetrics> out;
    for (std::size_t c = 0; c < names_.size(); ++c) {
        ClassMetrics m;
        m.name = names_[c];
        for (std::size_t o = 0; o < names_.size(); ++o) {
            m.support += counts_[c][o];
            m.predicted += counts_[o][c];
        }
        const double tp = static_cast<double>(counts_[c][c]);
        m.zero_division = m.predicted == 0;
        m.precision = m.predicted ? tp / static_cast<double>(m.predicted) : 0.0;
        m.recall = m.support ? tp / static_cast<double>(m.support) : 0.0;
        m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace triage
