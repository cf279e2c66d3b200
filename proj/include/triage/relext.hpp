#pragma once

// Convolutional relation classifier (located_in vs not_located_in) over
// word, per-entity positional and tag features, trained from scratch.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "triage/common.hpp"
#include "triage/metrics.hpp"
#include "triage/textproc.hpp"

namespace triage::relext {

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

// Class indices of the softmax output.
inline constexpr int kLocated = 0;
inline constexpr int kNotLocated = 1;

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    Vocab();
    /// Words seen at least `min_count` times, ids assigned in sorted order.
    static Vocab build(const std::vector<text::Sentence>& sentences, int min_count = 1);
    static Vocab from_words(std::vector<std::string> words);  // words[0..1] must be PAD/UNK

    int id(const std::string& word) const;
    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

struct RelationExample {
    std::vector<int> tokens;  // word ids, length max_len
    std::vector<int> dist1;   // token position minus E1 start, clipped to [-max_len, max_len]
    std::vector<int> dist2;
    std::vector<int> tags;
    int label = kLocated;
    int length = 0;           // unpadded tokens kept
};

/// Pads with PAD to `max_len`; longer sentences are cut to a window centered
/// on the span covering both entities. Throws ValidationError when the two
/// spans coincide or cannot both fit.
RelationExample featurize(const text::Sentence& tokens, const text::Mention& e1, const text::Mention& e2,
                          const Vocab& vocab, int max_len = 45, int label = kLocated);

struct CnnConfig {
    int max_len = 45;
    int word_dim = 50;
    int pos_dim = 20;
    int tag_dim = 10;
    std::vector<int> windows{2, 3, 4};
    int filters = 64;
    int dense = 128;
    double dropout = 0.5;
    int batch = 32;
    double learning_rate = 1e-3;
    int epochs = 5;
    double init_scale = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;

    int feature_width() const { return word_dim + 2 * pos_dim + tag_dim; }
    void validate() const;  // throws ConfigError
};

struct CnnParams {
    CnnConfig config;
    std::size_t vocab_size = 0;
    Eigen::MatrixXd word_emb;   // vocab x word_dim; row PAD stays zero
    Eigen::MatrixXd pos1_emb;   // (2 max_len + 1) x pos_dim
    Eigen::MatrixXd pos2_emb;
    Eigen::MatrixXd tag_emb;    // kTagCount x tag_dim
    std::vector<Eigen::MatrixXd> conv_w;  // per window: filters x (m * k)
    std::vector<Eigen::MatrixXd> conv_b;  // per window: filters x 1
    Eigen::MatrixXd dense_w;    // dense x (filters * windows)
    Eigen::MatrixXd dense_b;    // dense x 1
    Eigen::MatrixXd out_w;      // 2 x dense
    Eigen::MatrixXd out_b;      // 2 x 1

    /// Uniform(-init_scale, init_scale) from the config seed.
    static CnnParams init(const CnnConfig& config, std::size_t vocab_size);

    /// All tensors in a fixed order with stable names.
    std::vector<std::pair<std::string, Eigen::MatrixXd*>> tensors();
    std::vector<std::pair<std::string, const Eigen::MatrixXd*>> tensors() const;
    bool all_finite() const;
};

/// Everything forward computes that backward needs.
struct ForwardTrace {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> x;  // max_len x k
    std::vector<Eigen::VectorXd> pooled;               // per window, length filters
    std::vector<std::vector<int>> argmax;              // per window: row of the max (-1 if all <= 0)
    std::vector<int> map_length;                       // per window: n - m + 1
    Eigen::VectorXd h0;                                // concatenated pooled features
    Eigen::VectorXd h1_pre, h1;                        // dense pre-activation, post relu + dropout
    Eigen::VectorXd mask;                              // dropout multipliers
    Eigen::Vector2d probs;
};

/// Inference: dropout off. Returns (p_located, p_not_located).
Eigen::Vector2d forward(const RelationExample& ex, const CnnParams& params);

/// Forward with full trace. With `rng` non-null dropout is applied.
void forward_trace(const RelationExample& ex, const CnnParams& params, ForwardTrace& trace, Rng* rng);

/// Gradient of -log p[label] accumulated (scaled by `scale`) into `grad`.
/// Returns the example loss.
double backward(const RelationExample& ex, const CnnParams& params, const ForwardTrace& trace, CnnParams& grad,
                double scale);

/// Mean cross-entropy of a batch with dropout off, and its analytic gradient.
double batch_loss_and_gradient(const std::vector<RelationExample>& batch, const CnnParams& params, CnnParams* grad);

/// Zero tensors of the same shapes.
CnnParams zeros_like(const CnnParams& params);

// ---------------------------------------------------------------------------

/// Down-samples the majority label (seeded) and shuffles. Throws DataError when
/// a label is absent.
std::vector<RelationExample> balance_dataset(const std::vector<RelationExample>& examples, std::uint64_t seed);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainResult {
    CnnParams params;  // best validation loss
    std::vector<EpochLog> curve;
    int best_epoch = 0;
};

TrainResult train(const std::vector<RelationExample>& train_set, const std::vector<RelationExample>& validation_set,
                  const CnnConfig& config, std::size_t vocab_size);

double mean_loss(const std::vector<RelationExample>& set, const CnnParams& params);
int predict(const RelationExample& ex, const CnnParams& params);

struct RelationMetrics {
    std::vector<ClassMetrics> classes;  // located_in, not_located_in
    double accuracy = 0.0;
    std::size_t n = 0;
};

/// Throws DataError on an empty test set.
RelationMetrics evaluate(const CnnParams& params, const std::vector<RelationExample>& test_set);

// ---------------------------------------------------------------------------
// Checkpoint: "TRCN", u32 schema_version, config, vocab, then f32 LE tensors.

void save_checkpoint(const std::string& path, const CnnParams& params, const Vocab& vocab);
std::pair<CnnParams, Vocab> load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Planted relation corpus: E1 ... filler ... marker E2, where the marker right
// before E2 decides the label and markers also occur as distractors elsewhere.

struct LabeledPair {
    text::Sentence tokens;
    text::Mention e1;
    text::Mention e2;
    int label = kLocated;
};

struct PlantedCorpusConfig {
    std::vector<std::string> e1_words;    // symptom surfaces
    std::vector<std::string> e2_words;    // anatomy surfaces
    std::vector<std::string> filler_words;
    std::vector<std::string> positive_markers{"im", "am", "an", "in"};
    std::vector<std::string> negative_markers{"nach", "wegen", "trotz", "durch"};
    int min_gap = 4;   // tokens strictly between E1 and E2; > rule distance
    int max_gap = 16;
    int max_prefix = 6;
    int max_suffix = 6;
    double distractor_rate = 0.15;
    std::uint64_t seed = 1;
};

/// Word lists default to the symptom/anatomy surfaces of `dictionary` when empty.
PlantedCorpusConfig planted_config_from(const text::Dictionary& dictionary, std::uint64_t seed);

/// Exactly n pairs, alternating labels (balanced for even n).
std::vector<LabeledPair> planted_relation_corpus(const PlantedCorpusConfig& config, std::size_t n);

std::vector<RelationExample> featurize_all(const std::vector<LabeledPair>& pairs, const Vocab& vocab, int max_len);

/// Distant symptom/anatomy pairs of a sentence that the rules left undecided,
/// classified by the model; returns model relation candidates predicted located_in.
std::vector<text::RelationCandidate> extract_relations_model(const text::Sentence& tokens,
                                                             const std::vector<text::Mention>& mentions,
                                                             const std::vector<text::RelationCandidate>& rule_relations,
                                                             const CnnParams& params, const Vocab& vocab);

}  // namespace triage::relext
