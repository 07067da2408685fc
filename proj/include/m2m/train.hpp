#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "m2m/common.hpp"
#include "m2m/dsp.hpp"
#include "m2m/manifest.hpp"
#include "m2m/mashup.hpp"
#include "m2m/model.hpp"

namespace m2m {

enum class Domain : std::uint8_t { monophonic = 0, mixed = 1 };

// One trainable snippet. `vocal` always identifies the sung 3-second window
// (singer, track, start); for mixed items `recipe` additionally carries the
// full mix instruction and recipe.vocal == vocal.
struct TrainItem {
    Domain domain = Domain::monophonic;
    SegmentDescriptor vocal;
    MashupRecipe recipe;

    const std::string& singer_id() const { return vocal.singer_id; }
    const std::string& track_id() const { return vocal.track_id; }
};

// Training snippets with their mel spectrograms resident in memory. The
// manifest-backed factory renders every item up front so epochs touch no
// files; tests construct pools directly from synthetic mels. Every mel must
// share one (frames x bands) geometry.
class TrainingPool {
public:
    TrainingPool(std::vector<TrainItem> items, std::vector<MelSpectrogram> mels);

    // Monophonic items are the deduplicated vocal segments referenced by the
    // recipes; mixed items are the recipes themselves. Both filtered to
    // vocal tracks of `split`.
    static TrainingPool from_manifests(const CorpusManifest& corpus,
                                       const MashupManifest& mashups,
                                       Split split, int threads = 1);

    int size() const { return static_cast<int>(items_.size()); }
    const TrainItem& item(int index) const { return items_[index]; }
    const MelSpectrogram& mel(int index) const { return mels_[index]; }
    const std::vector<int>& domain_items(Domain d) const {
        return d == Domain::monophonic ? mono_items_ : mixed_items_;
    }
    const std::vector<std::string>& singers() const { return singers_; }
    int singer_index(const std::string& id) const;  // DataError if unknown
    int bands() const { return bands_; }
    int frames() const { return frames_; }

private:
    std::vector<TrainItem> items_;
    std::vector<MelSpectrogram> mels_;
    std::vector<int> mono_items_, mixed_items_;
    std::vector<std::string> singers_;
    int bands_ = 0;
    int frames_ = 0;
};

struct TripletConfig {
    double margin = 0.1;
    int n_negatives = 4;
    TrainMode mode = TrainMode::mono;
    bool hard_negatives = false;
    std::uint64_t seed = 0;
};

struct Triplet {
    int anchor = -1;
    int positive = -1;
    std::vector<int> negatives;
};

// Similarity of a candidate item to an anchor item under the current model;
// consulted only when hard_negatives is set.
using TripletScorer = std::function<double(int anchor_item, int candidate_item)>;

// Resolves role pools and per-singer candidate sets once; construction warns
// (stderr) about singers whose anchors have no usable positive and drops
// them. Sampling is a pure function of the seed.
class TripletSampler {
public:
    TripletSampler(const TrainingPool& pool, const TripletConfig& config);

    // Exactly batch_size triplets; anchors are a shuffled cycle over the
    // eligible anchor items.
    std::vector<Triplet> sample(int batch_size, std::uint64_t seed,
                                const TripletScorer& scorer = {}) const;
    // One triplet per eligible anchor item, shuffled.
    std::vector<Triplet> sample_epoch(std::uint64_t seed,
                                      const TripletScorer& scorer = {}) const;

    int n_eligible() const { return static_cast<int>(eligible_.size()); }
    Domain anchor_domain() const { return anchor_domain_; }
    Domain other_domain() const { return other_domain_; }

private:
    Triplet complete(int anchor, Rng& rng, const TripletScorer& scorer) const;

    const TrainingPool* pool_ = nullptr;
    TripletConfig config_;
    Domain anchor_domain_ = Domain::monophonic;
    Domain other_domain_ = Domain::monophonic;
    std::vector<int> eligible_;
    // Indexed by roster position of the anchor's singer.
    std::vector<std::vector<int>> positives_by_singer_;
    std::vector<std::vector<int>> negatives_by_singer_;
};

// Single-shot convenience form; seed comes from config.seed.
std::vector<Triplet> sample_triplets(const TrainingPool& pool,
                                     const TripletConfig& config,
                                     int batch_size,
                                     const TripletScorer& scorer = {});

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 32;
};

// First/second-moment buffers aligned with a parameter enumeration. Empty
// slots initialize to zero on first use.
struct AdamSlots {
    std::vector<std::vector<float>> m, v;
};

// One adaptive-moment update; t is the 1-based global step for bias
// correction. Reads grads, writes values.
void adam_step(const std::vector<TensorRef<float>>& params, AdamSlots& slots,
               std::uint64_t t, const AdamConfig& config);

// The two-network training pair. MONO/MIXED share one parameter set: the
// twin exists so batch statistics stay role-split, and its tensors are
// re-synced to anchor_net after every optimizer step. CROSS keeps the two
// networks independent.
struct ModelBundle {
    TrainMode mode = TrainMode::mono;
    SkeletonNet<float> anchor_net;
    SkeletonNet<float> other_net;

    bool shared() const { return mode != TrainMode::cross; }
    SkeletonNet<float>& net_for(Domain d) {
        return (mode == TrainMode::cross && d == Domain::mixed) ? other_net
                                                                : anchor_net;
    }
};

ModelBundle make_bundle(TrainMode mode, std::uint64_t seed,
                        int in_channels = kMelBands, int hidden = 128,
                        int embed_dim = 256);
// Clones one (typically pretrained) skeleton into both roles.
ModelBundle bundle_from_skeleton(TrainMode mode,
                                 const SkeletonNet<float>& skeleton);

struct PretrainConfig {
    Domain domain = Domain::monophonic;
    int epochs = 30;
    std::uint64_t seed = 0;
    int hidden = 128;
    int embed_dim = 256;
    int max_steps_per_epoch = 0;  // 0: every item once per epoch
    AdamConfig optimizer;
};

struct PretrainResult {
    SkeletonNet<float> skeleton;  // the classifier head is not part of this
    std::vector<double> loss_curve;  // mean cross-entropy per epoch
};

// Skeleton + linear head trained with cross-entropy over the pool's singer
// roster for exactly cfg.epochs epochs; the head is discarded and nothing
// is frozen.
PretrainResult pretrain_classifier(const TrainingPool& pool,
                                   const PretrainConfig& cfg);

struct TrainState {
    std::uint64_t step = 0;   // optimizer steps taken
    std::uint64_t epoch = 0;  // epochs completed
    std::uint64_t seed = 0;
    AdamSlots anchor_slots;
    AdamSlots other_slots;  // CROSS only
};

struct TrainSchedule {
    int epochs = 100;
    int max_steps_per_epoch = 0;     // 0: one pass over eligible anchors
    double early_stop_delta = 1e-4;  // minimum improvement over the best
    int early_stop_patience = 10;    // epochs without improvement; <= 0: off
};

using EpochCallback = std::function<void(
    int epoch, double loss, const ModelBundle& bundle, const TrainState& state)>;

struct TrainResult {
    std::vector<double> loss_curve;
    TrainState state;
};

// Minimizes the batch-mean hinge rank loss over sampled triplets. Anchors
// forward through anchor_net and positives/negatives through other_net in
// train phase (role-split batch statistics); a non-finite batch loss aborts
// with NumericError diagnostics.
TrainResult train_metric(ModelBundle& bundle, const TrainingPool& pool,
                         const TripletConfig& config,
                         const AdamConfig& optimizer,
                         const TrainSchedule& schedule = {},
                         const EpochCallback& on_epoch = {});

// Checkpoint container: magic "M2MX", version, mode tag, geometry, tensors
// of each non-shared network in declared order, optional optimizer state.
// Round-trips are byte-exact.
void save_checkpoint(ModelBundle& bundle, const TrainState* state,
                     const std::string& path);

struct Checkpoint {
    ModelBundle bundle;
    std::optional<TrainState> state;
};

Checkpoint load_checkpoint(const std::string& path);

// n x bands x frames batch of the given pool items.
Batch<float> gather_mel_batch(const TrainingPool& pool,
                              const std::vector<int>& items);

// Embeddings of the given items through one network, as one batch.
std::vector<EmbeddingVector> embed_items(SkeletonNet<float>& net,
                                         const TrainingPool& pool,
                                         const std::vector<int>& items,
                                         Phase phase,
                                         std::uint64_t dropout_seed);

}  // namespace m2m
