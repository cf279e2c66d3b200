#include "triage/relext.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "triage/binary_io.hpp"

namespace triage::relext {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstPatchMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

Vocab::Vocab() : words_{"<pad>", "<unk>"} {
    index_.emplace(words_[0], kPad);
    index_.emplace(words_[1], kUnk);
}

Vocab Vocab::from_words(std::vector<std::string> words) {
    if (words.size() < 2 || words[0] != "<pad>" || words[1] != "<unk>")
        throw ParseError("vocabulary must start with <pad>, <unk>");
    Vocab v;
    v.words_ = std::move(words);
    v.index_.clear();
    for (std::size_t i = 0; i < v.words_.size(); ++i)
        if (!v.index_.emplace(v.words_[i], static_cast<int>(i)).second)
            throw ParseError("duplicate vocabulary word '" + v.words_[i] + "'");
    return v;
}

Vocab Vocab::build(const std::vector<text::Sentence>& sentences, int min_count) {
    std::map<std::string, int> counts;
    for (const auto& s : sentences)
        for (const auto& t : s) ++counts[t.normalized];
    std::vector<std::string> words{"<pad>", "<unk>"};
    for (const auto& [w, c] : counts)
        if (c >= min_count && w != "<pad>" && w != "<unk>") words.push_back(w);
    return from_words(std::move(words));
}

int Vocab::id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

// ---------------------------------------------------------------------------

RelationExample featurize(const text::Sentence& tokens, const text::Mention& e1, const text::Mention& e2,
                          const Vocab& vocab, int max_len, int label) {
    const int n = static_cast<int>(tokens.size());
    auto check_span = [&](const text::Mention& m, const char* which) {
        if (m.start < 0 || m.end > n || m.start >= m.end)
            throw ValidationError(std::string("relation example: ") + which + " span outside the sentence");
    };
    check_span(e1, "E1");
    check_span(e2, "E2");
    if (e1.start == e2.start && e1.end == e2.end) throw ValidationError("relation example: E1 and E2 are the same span");
    if (max_len < 1) throw ConfigError("max_len must be positive");

    const int lo = std::min(e1.start, e2.start);
    const int hi = std::max(e1.end, e2.end);
    int begin = 0;
    if (n > max_len) {
        if (hi - lo > max_len) throw ValidationError("relation example: entity spans do not fit in the window");
        // Center the window on [lo, hi), then clamp so both spans stay inside.
        const int twice = lo + hi - max_len;
        begin = twice >= 0 ? twice / 2 : -((-twice + 1) / 2);
        begin = std::clamp(begin, std::max(0, hi - max_len), std::min(lo, n - max_len));
    }
    const int kept = std::min(n, max_len);

    RelationExample ex;
    ex.label = label;
    ex.length = kept;
    ex.tokens.resize(static_cast<std::size_t>(max_len));
    ex.dist1.resize(static_cast<std::size_t>(max_len));
    ex.dist2.resize(static_cast<std::size_t>(max_len));
    ex.tags.resize(static_cast<std::size_t>(max_len));
    for (int i = 0; i < max_len; ++i) {
        const int pos = begin + i;
        const auto u = static_cast<std::size_t>(i);
        if (i < kept) {
            ex.tokens[u] = vocab.id(tokens[static_cast<std::size_t>(pos)].normalized);
            ex.tags[u] = tokens[static_cast<std::size_t>(pos)].tag;
        } else {
            ex.tokens[u] = Vocab::kPad;
            ex.tags[u] = text::kTagPad;
        }
        ex.dist1[u] = std::clamp(pos - e1.start, -max_len, max_len);
        ex.dist2[u] = std::clamp(pos - e2.start, -max_len, max_len);
    }
    return ex;
}

// ---------------------------------------------------------------------------

void CnnConfig::validate() const {
    if (max_len < 1 || word_dim < 1 || pos_dim < 1 || tag_dim < 1 || filters < 1 || dense < 1)
        throw ConfigError("CNN dimensions must be positive");
    if (windows.empty()) throw ConfigError("CNN needs at least one window size");
    for (int m : windows)
        if (m < 1 || m > max_len) throw ConfigError("window size " + std::to_string(m) + " outside [1, max_len]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (batch < 1 || epochs < 0) throw ConfigError("batch must be >= 1 and epochs >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
}

std::vector<std::pair<std::string, Eigen::MatrixXd*>> CnnParams::tensors() {
    std::vector<std::pair<std::string, Eigen::MatrixXd*>> out{
        {"word_emb", &word_emb}, {"pos1_emb", &pos1_emb}, {"pos2_emb", &pos2_emb}, {"tag_emb", &tag_emb}};
    for (std::size_t w = 0; w < conv_w.size(); ++w) {
        const auto m = std::to_string(config.windows[w]);
        out.emplace_back("conv_w" + m, &conv_w[w]);
        out.emplace_back("conv_b" + m, &conv_b[w]);
    }
    out.emplace_back("dense_w", &dense_w);
    out.emplace_back("dense_b", &dense_b);
    out.emplace_back("out_w", &out_w);
    out.emplace_back("out_b", &out_b);
    return out;
}

std::vector<std::pair<std::string, const Eigen::MatrixXd*>> CnnParams::tensors() const {
    std::vector<std::pair<std::string, const Eigen::MatrixXd*>> out;
    for (auto& [name, t] : const_cast<CnnParams*>(this)->tensors()) out.emplace_back(name, t);
    return out;
}

bool CnnParams::all_finite() const {
    for (const auto& [name, t] : tensors())
        if (!t->allFinite()) return false;
    return true;
}

namespace {

void allocate(CnnParams& p) {
    const auto& c = p.config;
    const int k = c.feature_width();
    p.word_emb = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p.vocab_size), c.word_dim);
    p.pos1_emb = Eigen::MatrixXd::Zero(2 * c.max_len + 1, c.pos_dim);
    p.pos2_emb = Eigen::MatrixXd::Zero(2 * c.max_len + 1, c.pos_dim);
    p.tag_emb = Eigen::MatrixXd::Zero(text::kTagCount, c.tag_dim);
    p.conv_w.clear();
    p.conv_b.clear();
    for (int m : c.windows) {
        p.conv_w.push_back(Eigen::MatrixXd::Zero(c.filters, m * k));
        p.conv_b.push_back(Eigen::MatrixXd::Zero(c.filters, 1));
    }
    const int pooled = c.filters * static_cast<int>(c.windows.size());
    p.dense_w = Eigen::MatrixXd::Zero(c.dense, pooled);
    p.dense_b = Eigen::MatrixXd::Zero(c.dense, 1);
    p.out_w = Eigen::MatrixXd::Zero(2, c.dense);
    p.out_b = Eigen::MatrixXd::Zero(2, 1);
}

bool is_bias(const std::string& name) { return name.find("_b") != std::string::npos && name.find("emb") == std::string::npos; }

}  // namespace

CnnParams zeros_like(const CnnParams& params) {
    CnnParams z;
    z.config = params.config;
    z.vocab_size = params.vocab_size;
    allocate(z);
    return z;
}

CnnParams CnnParams::init(const CnnConfig& config, std::size_t vocab_size) {
    config.validate();
    if (vocab_size < 2) throw ConfigError("vocabulary must contain at least PAD and UNK");
    CnnParams p;
    p.config = config;
    p.vocab_size = vocab_size;
    allocate(p);
    Rng rng(config.seed);
    for (auto& [name, t] : p.tensors()) {
        if (is_bias(name)) continue;
        for (Eigen::Index j = 0; j < t->cols(); ++j)
            for (Eigen::Index i = 0; i < t->rows(); ++i)
                (*t)(i, j) = uniform_range(rng, -config.init_scale, config.init_scale);
    }
    p.word_emb.row(Vocab::kPad).setZero();
    return p;
}

// ---------------------------------------------------------------------------

void forward_trace(const RelationExample& ex, const CnnParams& params, ForwardTrace& tr, Rng* rng) {
    const auto& c = params.config;
    const int L = c.max_len;
    const int k = c.feature_width();
    if (static_cast<int>(ex.tokens.size()) != L || static_cast<int>(ex.dist1.size()) != L ||
        static_cast<int>(ex.dist2.size()) != L || static_cast<int>(ex.tags.size()) != L)
        throw ConfigError("example length " + std::to_string(ex.tokens.size()) + " does not match max_len " +
                          std::to_string(L));

    tr.x.resize(L, k);
    for (int i = 0; i < L; ++i) {
        const auto u = static_cast<std::size_t>(i);
        const int tok = ex.tokens[u], d1 = ex.dist1[u] + L, d2 = ex.dist2[u] + L, tag = ex.tags[u];
        if (tok < 0 || tok >= params.word_emb.rows() || d1 < 0 || d1 > 2 * L || d2 < 0 || d2 > 2 * L || tag < 0 ||
            tag >= params.tag_emb.rows())
            throw ConfigError("example feature id out of range for the parameter shapes");
        tr.x.row(i).segment(0, c.word_dim) = params.word_emb.row(tok);
        tr.x.row(i).segment(c.word_dim, c.pos_dim) = params.pos1_emb.row(d1);
        tr.x.row(i).segment(c.word_dim + c.pos_dim, c.pos_dim) = params.pos2_emb.row(d2);
        tr.x.row(i).segment(c.word_dim + 2 * c.pos_dim, c.tag_dim) = params.tag_emb.row(tag);
    }

    const std::size_t nw = c.windows.size();
    tr.pooled.resize(nw);
    tr.argmax.resize(nw);
    tr.map_length.resize(nw);
    tr.h0.resize(c.filters * static_cast<Eigen::Index>(nw));
    for (std::size_t w = 0; w < nw; ++w) {
        const int m = c.windows[w];
        const int nm = L - m + 1;
        tr.map_length[w] = nm;
        // Rows i..i+m-1 of the row-major input are contiguous, so the patch
        // matrix is a strided view with no copy.
        const ConstPatchMap patches(tr.x.data(), nm, static_cast<Eigen::Index>(m) * k, Eigen::OuterStride<>(k));
        Eigen::MatrixXd z = patches * params.conv_w[w].transpose();
        z.rowwise() += params.conv_b[w].col(0).transpose();
        auto& pooled = tr.pooled[w];
        auto& arg = tr.argmax[w];
        pooled.resize(c.filters);
        arg.assign(static_cast<std::size_t>(c.filters), -1);
        for (int f = 0; f < c.filters; ++f) {
            Eigen::Index row = 0;
            const double best = z.col(f).maxCoeff(&row);
            // relu then max-pool: a non-positive maximum pools to zero with no gradient.
            if (best > 0.0) {
                pooled(f) = best;
                arg[static_cast<std::size_t>(f)] = static_cast<int>(row);
            } else {
                pooled(f) = 0.0;
            }
        }
        tr.h0.segment(static_cast<Eigen::Index>(w) * c.filters, c.filters) = pooled;
    }

    tr.h1_pre = params.dense_w * tr.h0 + params.dense_b.col(0);
    tr.mask = Eigen::VectorXd::Ones(c.dense);
    if (rng && c.dropout > 0.0) {
        const double keep = 1.0 - c.dropout;
        for (int j = 0; j < c.dense; ++j) tr.mask(j) = bernoulli(*rng, keep) ? 1.0 / keep : 0.0;
    }
    tr.h1 = tr.h1_pre.cwiseMax(0.0).cwiseProduct(tr.mask);
    const Eigen::Vector2d logits = params.out_w * tr.h1 + params.out_b.col(0);
    const double top = logits.maxCoeff();
    const Eigen::Vector2d e = (logits.array() - top).exp();
    tr.probs = e / e.sum();
}

Eigen::Vector2d forward(const RelationExample& ex, const CnnParams& params) {
    ForwardTrace tr;
    forward_trace(ex, params, tr, nullptr);
    return tr.probs;
}

double backward(const RelationExample& ex, const CnnParams& params, const ForwardTrace& tr, CnnParams& grad,
                double scale) {
    const auto& c = params.config;
    const int L = c.max_len;
    const int k = c.feature_width();
    const double p_true = tr.probs(ex.label);
    const double loss = -std::log(std::max(p_true, 1e-300));

    Eigen::Vector2d dlogits = tr.probs;
    dlogits(ex.label) -= 1.0;
    dlogits *= scale;
    grad.out_w.noalias() += dlogits * tr.h1.transpose();
    grad.out_b.col(0) += dlogits;

    const Eigen::VectorXd dh1 = params.out_w.transpose() * dlogits;
    Eigen::VectorXd dh1_pre(c.dense);
    for (int j = 0; j < c.dense; ++j) dh1_pre(j) = tr.h1_pre(j) > 0.0 ? dh1(j) * tr.mask(j) : 0.0;
    grad.dense_w.noalias() += dh1_pre * tr.h0.transpose();
    grad.dense_b.col(0) += dh1_pre;
    const Eigen::VectorXd dh0 = params.dense_w.transpose() * dh1_pre;

    RowMatrix dx = RowMatrix::Zero(L, k);
    for (std::size_t w = 0; w < c.windows.size(); ++w) {
        const int m = c.windows[w];
        const Eigen::Index width = static_cast<Eigen::Index>(m) * k;
        for (int f = 0; f < c.filters; ++f) {
            const int a = tr.argmax[w][static_cast<std::size_t>(f)];
            if (a < 0) continue;
            const double g = dh0(static_cast<Eigen::Index>(w) * c.filters + f);
            if (g == 0.0) continue;
            const Eigen::Map<const Eigen::RowVectorXd> patch(tr.x.data() + static_cast<Eigen::Index>(a) * k, width);
            grad.conv_w[w].row(f) += g * patch;
            grad.conv_b[w](f, 0) += g;
            Eigen::Map<Eigen::RowVectorXd> dpatch(dx.data() + static_cast<Eigen::Index>(a) * k, width);
            dpatch += g * params.conv_w[w].row(f);
        }
    }

    for (int i = 0; i < L; ++i) {
        const auto u = static_cast<std::size_t>(i);
        const auto row = dx.row(i);
        if (ex.tokens[u] != Vocab::kPad) grad.word_emb.row(ex.tokens[u]) += row.segment(0, c.word_dim);
        grad.pos1_emb.row(ex.dist1[u] + L) += row.segment(c.word_dim, c.pos_dim);
        grad.pos2_emb.row(ex.dist2[u] + L) += row.segment(c.word_dim + c.pos_dim, c.pos_dim);
        grad.tag_emb.row(ex.tags[u]) += row.segment(c.word_dim + 2 * c.pos_dim, c.tag_dim);
    }
    return loss;
}

double batch_loss_and_gradient(const std::vector<RelationExample>& batch, const CnnParams& params, CnnParams* grad) {
    if (batch.empty()) throw DataError("empty batch");
    const double scale = 1.0 / static_cast<double>(batch.size());
    CnnParams scratch = zeros_like(params);
    CnnParams& g = grad ? *grad : scratch;
    if (grad) g = zeros_like(params);
    ForwardTrace tr;
    double loss = 0.0;
    for (const auto& ex : batch) {
        forward_trace(ex, params, tr, nullptr);
        loss += backward(ex, params, tr, g, scale);
    }
    return loss * scale;
}

// ---------------------------------------------------------------------------

std::vector<RelationExample> balance_dataset(const std::vector<RelationExample>& examples, std::uint64_t seed) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < examples.size(); ++i) (examples[i].label == kLocated ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty()) throw DataError("balance_dataset: one relation label is absent");
    Rng rng(seed);
    auto& major = pos.size() >= neg.size() ? pos : neg;
    const auto keep = std::min(pos.size(), neg.size());
    shuffle(major, rng);
    major.resize(keep);
    std::vector<std::size_t> chosen(pos);
    chosen.insert(chosen.end(), neg.begin(), neg.end());
    std::sort(chosen.begin(), chosen.end());
    shuffle(chosen, rng);
    std::vector<RelationExample> out;
    out.reserve(chosen.size());
    for (auto i : chosen) out.push_back(examples[i]);
    return out;
}

double mean_loss(const std::vector<RelationExample>& set, const CnnParams& params) {
    if (set.empty()) throw DataError("mean_loss of an empty set");
    std::vector<double> losses(set.size());
    const auto n = static_cast<std::ptrdiff_t>(set.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& ex = set[static_cast<std::size_t>(i)];
        losses[static_cast<std::size_t>(i)] = -std::log(std::max(forward(ex, params)(ex.label), 1e-300));
    }
    // Summed serially so the result does not depend on the thread count.
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(set.size());
}

int predict(const RelationExample& ex, const CnnParams& params) {
    const auto p = forward(ex, params);
    return p(kLocated) >= p(kNotLocated) ? kLocated : kNotLocated;
}

TrainResult train(const std::vector<RelationExample>& train_set, const std::vector<RelationExample>& validation_set,
                  const CnnConfig& config, std::size_t vocab_size) {
    config.validate();
    if (train_set.empty()) throw DataError("empty relation training set");
    TrainResult result;
    CnnParams params = CnnParams::init(config, vocab_size);
    CnnParams grad = zeros_like(params), adam_m = zeros_like(params), adam_v = zeros_like(params);
    auto p_t = params.tensors();
    auto g_t = grad.tensors();
    auto m_t = adam_m.tensors();
    auto v_t = adam_v.tensors();

    Rng rng(config.seed ^ 0x5DEECE66DULL);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    ForwardTrace tr;
    double best_val = std::numeric_limits<double>::infinity();
    result.params = params;
    long step = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle(order, rng);
        double epoch_loss = 0.0;
        std::size_t correct = 0;
        int batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
            ++batch_no;
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
            for (auto& [name, t] : g_t) t->setZero();
            const double scale = 1.0 / static_cast<double>(end - start);
            double batch_loss = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const auto& ex = train_set[order[b]];
                forward_trace(ex, params, tr, &rng);
                batch_loss += backward(ex, params, tr, grad, scale);
                const int pred = tr.probs(kLocated) >= tr.probs(kNotLocated) ? kLocated : kNotLocated;
                correct += pred == ex.label;
            }
            if (!std::isfinite(batch_loss))
                throw TrainingError("loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no));
            epoch_loss += batch_loss * scale;

            ++step;
            const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
            grad.word_emb.row(Vocab::kPad).setZero();
            for (std::size_t t = 0; t < p_t.size(); ++t) {
                auto& g = *g_t[t].second;
                auto& m = *m_t[t].second;
                auto& v = *v_t[t].second;
                m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * g;
                v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * g.cwiseAbs2();
                p_t[t].second->array() -=
                    config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.adam_eps);
            }
            if (!params.all_finite())
                throw TrainingError("parameters became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no));
        }
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = epoch_loss / batch_no;
        log.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        log.val_loss = validation_set.empty() ? log.train_loss : mean_loss(validation_set, params);
        if (!std::isfinite(log.val_loss))
            throw TrainingError("validation loss non-finite at epoch " + std::to_string(epoch));
        spdlog::info("relext epoch {} train_loss={:.5f} train_acc={:.4f} val_loss={:.5f}", epoch, log.train_loss,
                     log.train_accuracy, log.val_loss);
        result.curve.push_back(log);
        if (log.val_loss < best_val) {
            best_val = log.val_loss;
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

RelationMetrics evaluate(const CnnParams& params, const std::vector<RelationExample>& test_set) {
    if (test_set.empty()) throw DataError("empty relation test set");
    std::vector<int> preds(test_set.size());
    const auto n = static_cast<std::ptrdiff_t>(test_set.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        preds[static_cast<std::size_t>(i)] = predict(test_set[static_cast<std::size_t>(i)], params);
    Confusion conf({"located_in", "not_located_in"});
    for (std::size_t i = 0; i < test_set.size(); ++i)
        conf.add(static_cast<std::size_t>(test_set[i].label), static_cast<std::size_t>(preds[i]));
    RelationMetrics out;
    out.classes = conf.per_class();
    out.accuracy = conf.accuracy();
    out.n = test_set.size();
    return out;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const CnnParams& params, const Vocab& vocab) {
    if (vocab.size() != params.vocab_size) throw ConfigError("checkpoint vocabulary does not match parameters");
    const auto& c = params.config;
    ByteWriter w;
    w.bytes("TRCN");
    w.u32(kCheckpointSchemaVersion);
    w.u32(static_cast<std::uint32_t>(c.max_len));
    w.u32(static_cast<std::uint32_t>(c.word_dim));
    w.u32(static_cast<std::uint32_t>(c.pos_dim));
    w.u32(static_cast<std::uint32_t>(c.tag_dim));
    w.u32(static_cast<std::uint32_t>(c.filters));
    w.u32(static_cast<std::uint32_t>(c.dense));
    w.u32(static_cast<std::uint32_t>(c.windows.size()));
    for (int m : c.windows) w.u32(static_cast<std::uint32_t>(m));
    w.f64(c.dropout);
    w.u32(static_cast<std::uint32_t>(vocab.size()));
    for (const auto& word : vocab.words()) w.str(word);
    const auto tensors = params.tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t->rows()));
        w.u32(static_cast<std::uint32_t>(t->cols()));
        for (Eigen::Index i = 0; i < t->rows(); ++i)
            for (Eigen::Index j = 0; j < t->cols(); ++j) w.f32(static_cast<float>((*t)(i, j)));
    }
    write_file(path, w.data());
}

std::pair<CnnParams, Vocab> load_checkpoint(const std::string& path) {
    const std::string data = read_file(path);
    ByteReader r(data);
    if (r.bytes(4) != "TRCN") throw ParseError(path + ": not a relation model checkpoint");
    const auto version = r.u32();
    if (version != kCheckpointSchemaVersion)
        throw ParseError(path + ": unsupported checkpoint schema_version " + std::to_string(version));
    CnnConfig c;
    c.max_len = static_cast<int>(r.u32());
    c.word_dim = static_cast<int>(r.u32());
    c.pos_dim = static_cast<int>(r.u32());
    c.tag_dim = static_cast<int>(r.u32());
    c.filters = static_cast<int>(r.u32());
    c.dense = static_cast<int>(r.u32());
    c.windows.resize(r.u32());
    for (auto& m : c.windows) m = static_cast<int>(r.u32());
    c.dropout = r.f64();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ParseError(path + ": bad checkpoint header: " + e.what());
    }
    std::vector<std::string> words(r.u32());
    for (auto& word : words) word = r.str();
    Vocab vocab = Vocab::from_words(std::move(words));

    CnnParams p;
    p.config = c;
    p.vocab_size = vocab.size();
    allocate(p);
    auto tensors = p.tensors();
    if (r.u32() != tensors.size()) throw ParseError(path + ": tensor count does not match the header shapes");
    for (auto& [name, t] : tensors) {
        const auto stored = r.str();
        const auto rows = r.u32(), cols = r.u32();
        if (stored != name || rows != t->rows() || cols != t->cols())
            throw ParseError(path + ": tensor " + stored + " has unexpected name or shape");
        for (Eigen::Index i = 0; i < t->rows(); ++i)
            for (Eigen::Index j = 0; j < t->cols(); ++j) (*t)(i, j) = static_cast<double>(r.f32());
    }
    if (!r.done()) throw ParseError(path + ": trailing bytes after the last tensor");
    return {std::move(p), std::move(vocab)};
}

// ---------------------------------------------------------------------------

PlantedCorpusConfig planted_config_from(const text::Dictionary& dictionary, std::uint64_t seed) {
    PlantedCorpusConfig c;
    c.seed = seed;
    std::set<std::string> markers(c.positive_markers.begin(), c.positive_markers.end());
    markers.insert(c.negative_markers.begin(), c.negative_markers.end());
    std::set<std::string> e1, e2;
    for (const auto& e : dictionary.entries()) {
        for (const auto& s : e.normalized_synonyms) {
            if (s.find(' ') != std::string::npos || markers.contains(s)) continue;
            if (e.type == SemanticType::anatomy) e2.insert(s);
            else if (e.type == SemanticType::symptom) e1.insert(s);
        }
    }
    c.e1_words.assign(e1.begin(), e1.end());
    c.e2_words.assign(e2.begin(), e2.end());
    c.filler_words = {"zunehmend", "deutlich",  "ploetzlich", "nachts",   "morgens",  "abends",  "laufen",
                      "gehen",     "treppe",    "arbeit",     "sport",    "essen",    "trinken", "liegen",
                      "sitzen",    "stehen",    "wetter",     "kaelte",   "stress",   "urlaub",  "reise",
                      "garten",    "auto",      "wochen",     "tagen",    "stunden",  "minuten", "dauer",
                      "staerker",  "schwaecher", "wieder",    "immer",    "manchmal", "oft",     "selten",
                      "kurz",      "lang",      "bisher",     "zuletzt",  "insgesamt"};
    return c;
}

std::vector<LabeledPair> planted_relation_corpus(const PlantedCorpusConfig& c, std::size_t n) {
    if (c.e1_words.empty() || c.e2_words.empty() || c.filler_words.empty() || c.positive_markers.empty() ||
        c.negative_markers.empty())
        throw ConfigError("planted relation corpus needs non-empty word lists");
    if (c.min_gap < 1 || c.max_gap < c.min_gap) throw ConfigError("planted relation corpus: bad gap range");
    Rng rng(c.seed);
    auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[uniform_index(rng, v.size())]; };
    auto filler = [&]() -> std::string {
        if (bernoulli(rng, c.distractor_rate))
            return bernoulli(rng, 0.5) ? pick(c.positive_markers) : pick(c.negative_markers);
        return pick(c.filler_words);
    };

    std::vector<LabeledPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        LabeledPair p;
        p.label = i % 2 == 0 ? kLocated : kNotLocated;
        std::vector<std::pair<std::string, int>> words;  // word, tag
        const auto prefix = uniform_index(rng, static_cast<std::uint64_t>(c.max_prefix + 1));
        for (std::uint64_t j = 0; j < prefix; ++j) words.emplace_back(filler(), text::kTagWord);
        const int e1 = static_cast<int>(words.size());
        words.emplace_back(pick(c.e1_words), text::kTagSymptom);
        const int gap = c.min_gap + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(c.max_gap - c.min_gap + 1)));
        for (int j = 0; j < gap - 1; ++j) words.emplace_back(filler(), text::kTagWord);
        words.emplace_back(p.label == kLocated ? pick(c.positive_markers) : pick(c.negative_markers), text::kTagWord);
        const int e2 = static_cast<int>(words.size());
        words.emplace_back(pick(c.e2_words), text::kTagAnatomy);
        const auto suffix = uniform_index(rng, static_cast<std::uint64_t>(c.max_suffix + 1));
        for (std::uint64_t j = 0; j < suffix; ++j) words.emplace_back(filler(), text::kTagWord);

        for (std::size_t j = 0; j < words.size(); ++j) {
            text::Token t;
            t.surface = t.normalized = words[j].first;
            t.index = static_cast<int>(j);
            t.tag = words[j].second;
            p.tokens.push_back(std::move(t));
        }
        p.e1 = {words[static_cast<std::size_t>(e1)].first, e1, e1 + 1, Polarity::present, text::MentionSource::dictionary,
                SemanticType::symptom};
        p.e2 = {words[static_cast<std::size_t>(e2)].first, e2, e2 + 1, Polarity::present, text::MentionSource::dictionary,
                SemanticType::anatomy};
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<RelationExample> featurize_all(const std::vector<LabeledPair>& pairs, const Vocab& vocab, int max_len) {
    std::vector<RelationExample> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(featurize(p.tokens, p.e1, p.e2, vocab, max_len, p.label));
    return out;
}

std::vector<text::RelationCandidate> extract_relations_model(const text::Sentence& tokens,
                                                             const std::vector<text::Mention>& mentions,
                                                             const std::vector<text::RelationCandidate>& rule_relations,
                                                             const CnnParams& params, const Vocab& vocab) {
    auto is_head = [](SemanticType t) {
        return t == SemanticType::symptom || t == SemanticType::disease || t == SemanticType::operation;
    };
    std::vector<text::RelationCandidate> out;
    for (const auto& a : mentions) {
        if (!is_head(a.type)) continue;
        for (const auto& b : mentions) {
            if (b.type != SemanticType::anatomy) continue;
            // Pairs in different clauses are not related in the shipped corpus format.
            if (tokens[static_cast<std::size_t>(a.start)].clause != tokens[static_cast<std::size_t>(b.start)].clause)
                continue;
            const bool ruled = std::any_of(rule_relations.begin(), rule_relations.end(), [&](const auto& r) {
                return r.e1.start == a.start && r.e2.start == b.start;
            });
            if (ruled) continue;
            const int lo = std::min(a.start, b.start), hi = std::max(a.end, b.end);
            if (hi - lo > params.config.max_len) continue;
            const auto ex = featurize(tokens, a, b, vocab, params.config.max_len);
            if (predict(ex, params) == kLocated)
                out.push_back({a, b, text::RelationKind::located_in, text::RelationSource::model});
        }
    }
    return out;
}

}  // namespace triage::relext
