#include "m2m/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <utility>

#include "m2m/audio.hpp"

namespace m2m {

namespace {

const char* domain_name(Domain d) {
    return d == Domain::monophonic ? "monophonic" : "mixed";
}

const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::mono: return "mono";
        case TrainMode::mixed: return "mixed";
        case TrainMode::cross: return "cross";
    }
    return "?";
}

}  // namespace

TrainingPool::TrainingPool(std::vector<TrainItem> items,
                           std::vector<MelSpectrogram> mels)
    : items_(std::move(items)), mels_(std::move(mels)) {
    if (items_.size() != mels_.size()) {
        throw ConfigError("TrainingPool: " + std::to_string(items_.size()) +
                          " items but " + std::to_string(mels_.size()) +
                          " mel spectrograms");
    }
    if (items_.empty()) throw DataError("TrainingPool: no training items");
    bands_ = mels_[0].bands;
    frames_ = mels_[0].frames;
    std::set<std::string> roster;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (mels_[i].bands != bands_ || mels_[i].frames != frames_) {
            throw ConfigError("TrainingPool: item " + std::to_string(i) +
                              " mel geometry differs from item 0");
        }
        if (items_[i].singer_id().empty()) {
            throw DataError("TrainingPool: item " + std::to_string(i) +
                            " has no singer id");
        }
        const int idx = static_cast<int>(i);
        if (items_[i].domain == Domain::monophonic) {
            mono_items_.push_back(idx);
        } else {
            mixed_items_.push_back(idx);
        }
        roster.insert(items_[i].singer_id());
    }
    singers_.assign(roster.begin(), roster.end());
}

int TrainingPool::singer_index(const std::string& id) const {
    const auto it = std::lower_bound(singers_.begin(), singers_.end(), id);
    if (it == singers_.end() || *it != id) {
        throw DataError("TrainingPool: unknown singer " + id);
    }
    return static_cast<int>(it - singers_.begin());
}

TrainingPool TrainingPool::from_manifests(const CorpusManifest& corpus,
                                          const MashupManifest& mashups,
                                          Split split, int threads) {
    // Monophonic items: deduplicated vocal segments of the wanted split, in
    // (track, start) order. Mixed items: the recipes themselves, in manifest
    // order. Both reference the same segment universe, so every singer with
    // mixed items also has monophonic ones and vice versa.
    std::map<std::pair<std::string, double>, const MashupRecipe*> vocal_segs;
    std::vector<const MashupRecipe*> kept;
    for (const MashupRecipe& r : mashups.recipes) {
        if (corpus.find(r.vocal.track_id).split != split) continue;
        kept.push_back(&r);
        vocal_segs.emplace(std::make_pair(r.vocal.track_id, r.vocal.start), &r);
    }
    if (kept.empty()) {
        throw DataError(std::string("TrainingPool: no recipes with ") +
                        split_name(split) + "-split vocal tracks");
    }

    std::vector<TrainItem> items;
    items.reserve(vocal_segs.size() + kept.size());
    for (const auto& [key, recipe] : vocal_segs) {
        TrainItem it;
        it.domain = Domain::monophonic;
        it.vocal = recipe->vocal;
        items.push_back(std::move(it));
    }
    for (const MashupRecipe* r : kept) {
        TrainItem it;
        it.domain = Domain::mixed;
        it.vocal = r->vocal;
        it.recipe = *r;
        items.push_back(std::move(it));
    }

    // Load every referenced track once, then render item mels in parallel
    // over the read-only clip table.
    std::map<std::string, AudioClip> clips;
    for (const TrainItem& it : items) {
        clips.emplace(it.track_id(), AudioClip{});
        if (it.domain == Domain::mixed) {
            clips.emplace(it.recipe.background.track_id, AudioClip{});
        }
    }
    for (auto& [track_id, clip] : clips) {
        clip = load_wav(corpus.resolve(corpus.find(track_id)));
    }

    std::vector<MelSpectrogram> mels(items.size());
    parallel_for(items.size(), threads, [&](std::size_t i) {
        const TrainItem& it = items[i];
        AudioClip snippet;
        if (it.domain == Domain::monophonic) {
            snippet = extract_segment(clips.at(it.track_id()), it.vocal.start,
                                      it.vocal.duration);
        } else {
            snippet = render_recipe(it.recipe, clips.at(it.track_id()),
                                    clips.at(it.recipe.background.track_id));
        }
        mels[i] = mel_spectrogram(stft(snippet));
    });
    return TrainingPool(std::move(items), std::move(mels));
}

TripletSampler::TripletSampler(const TrainingPool& pool,
                               const TripletConfig& config)
    : pool_(&pool), config_(config) {
    if (!(config.margin > 0.0)) {
        throw ConfigError("TripletSampler: margin must be > 0");
    }
    if (config.n_negatives < 1) {
        throw ConfigError("TripletSampler: n_negatives must be >= 1");
    }
    switch (config.mode) {
        case TrainMode::mono:
            anchor_domain_ = Domain::monophonic;
            other_domain_ = Domain::monophonic;
            break;
        case TrainMode::mixed:
            anchor_domain_ = Domain::mixed;
            other_domain_ = Domain::mixed;
            break;
        case TrainMode::cross:
            anchor_domain_ = Domain::monophonic;
            other_domain_ = Domain::mixed;
            break;
    }
    const int n_singers = static_cast<int>(pool.singers().size());
    positives_by_singer_.resize(n_singers);
    negatives_by_singer_.resize(n_singers);
    for (int idx : pool.domain_items(other_domain_)) {
        const int s = pool.singer_index(pool.item(idx).singer_id());
        positives_by_singer_[s].push_back(idx);
        for (int other = 0; other < n_singers; ++other) {
            if (other != s) negatives_by_singer_[other].push_back(idx);
        }
    }

    std::vector<int> skipped_per_singer(n_singers, 0);
    for (int idx : pool.domain_items(anchor_domain_)) {
        const int s = pool.singer_index(pool.item(idx).singer_id());
        const auto& pos = positives_by_singer_[s];
        const bool has_positive =
            !pos.empty() && !(pos.size() == 1 && pos[0] == idx);
        if (has_positive) {
            eligible_.push_back(idx);
        } else {
            ++skipped_per_singer[s];
        }
    }
    for (int s = 0; s < n_singers; ++s) {
        if (skipped_per_singer[s] > 0) {
            std::cerr << "warning: singer " << pool.singers()[s] << " has no "
                      << domain_name(other_domain_)
                      << " positive candidate; skipping "
                      << skipped_per_singer[s] << " anchor segment(s)\n";
        }
    }
    if (eligible_.empty()) {
        throw ConfigError("TripletSampler: no anchor has a usable positive");
    }
    for (int idx : eligible_) {
        const int s = pool.singer_index(pool.item(idx).singer_id());
        if (negatives_by_singer_[s].empty()) {
            throw ConfigError(
                "TripletSampler: need segments from at least 2 singers");
        }
    }
}

Triplet TripletSampler::complete(int anchor, Rng& rng,
                                 const TripletScorer& scorer) const {
    const TrainingPool& pool = *pool_;
    const int s = pool.singer_index(pool.item(anchor).singer_id());
    const std::string& anchor_track = pool.item(anchor).track_id();

    // Positive: same singer, a different track when one exists.
    std::vector<int> cands;
    for (int idx : positives_by_singer_[s]) {
        if (idx != anchor && pool.item(idx).track_id() != anchor_track) {
            cands.push_back(idx);
        }
    }
    if (cands.empty()) {
        for (int idx : positives_by_singer_[s]) {
            if (idx != anchor) cands.push_back(idx);
        }
    }
    Triplet t;
    t.anchor = anchor;
    t.positive = cands[rng.next_below(cands.size())];

    const std::vector<int>& neg_pool = negatives_by_singer_[s];
    const int want = config_.n_negatives;
    auto draw_distinct = [&](int count) {
        std::vector<int> scratch = neg_pool;
        const int take = std::min<int>(count, static_cast<int>(scratch.size()));
        for (int j = 0; j < take; ++j) {
            const std::size_t pick =
                j + rng.next_below(scratch.size() - static_cast<std::size_t>(j));
            std::swap(scratch[j], scratch[pick]);
        }
        scratch.resize(take);
        return scratch;
    };

    if (config_.hard_negatives) {
        if (!scorer) {
            throw ConfigError(
                "TripletSampler: hard_negatives requires a scorer");
        }
        // Twenty random candidates, keep the highest scoring against the
        // anchor; ties break toward the lower item index.
        std::vector<int> pool20 = draw_distinct(20);
        std::vector<std::pair<double, int>> scored;
        scored.reserve(pool20.size());
        for (int idx : pool20) scored.emplace_back(scorer(anchor, idx), idx);
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (int j = 0; j < want; ++j) {
            t.negatives.push_back(scored[j % scored.size()].second);
        }
    } else if (static_cast<int>(neg_pool.size()) >= want) {
        t.negatives = draw_distinct(want);
    } else {
        for (int j = 0; j < want; ++j) {
            t.negatives.push_back(neg_pool[rng.next_below(neg_pool.size())]);
        }
    }
    return t;
}

std::vector<Triplet> TripletSampler::sample(int batch_size, std::uint64_t seed,
                                            const TripletScorer& scorer) const {
    if (batch_size < 1) throw ConfigError("TripletSampler: batch_size < 1");
    Rng rng(derive_seed(seed, "triplet-batch"));
    std::vector<int> order = eligible_;
    rng.shuffle(order);
    std::vector<Triplet> out;
    out.reserve(batch_size);
    for (int i = 0; i < batch_size; ++i) {
        out.push_back(complete(order[i % order.size()], rng, scorer));
    }
    return out;
}

std::vector<Triplet> TripletSampler::sample_epoch(
    std::uint64_t seed, const TripletScorer& scorer) const {
    Rng rng(derive_seed(seed, "triplet-epoch"));
    std::vector<int> order = eligible_;
    rng.shuffle(order);
    std::vector<Triplet> out;
    out.reserve(order.size());
    for (int a : order) out.push_back(complete(a, rng, scorer));
    return out;
}

std::vector<Triplet> sample_triplets(const TrainingPool& pool,
                                     const TripletConfig& config,
                                     int batch_size,
                                     const TripletScorer& scorer) {
    TripletSampler sampler(pool, config);
    return sampler.sample(batch_size, config.seed, scorer);
}

void adam_step(const std::vector<TensorRef<float>>& params, AdamSlots& slots,
               std::uint64_t t, const AdamConfig& config) {
    if (t < 1) throw ConfigError("adam_step: step index is 1-based");
    if (slots.m.empty()) {
        slots.m.resize(params.size());
        slots.v.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            slots.m[p].assign(params[p].value->size(), 0.0f);
            slots.v[p].assign(params[p].value->size(), 0.0f);
        }
    }
    if (slots.m.size() != params.size() || slots.v.size() != params.size()) {
        throw ConfigError("adam_step: slot count mismatch");
    }
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::vector<float>& value = *params[p].value;
        const std::vector<float>& grad = *params[p].grad;
        std::vector<float>& m = slots.m[p];
        std::vector<float>& v = slots.v[p];
        if (m.size() != value.size() || grad.size() != value.size()) {
            throw ConfigError("adam_step: buffer not shape-congruent with " +
                              params[p].name);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            const double mn = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            const double vn =
                config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            m[i] = static_cast<float>(mn);
            v[i] = static_cast<float>(vn);
            value[i] -= static_cast<float>(
                config.lr * (mn / c1) / (std::sqrt(vn / c2) + config.eps));
        }
    }
}

ModelBundle make_bundle(TrainMode mode, std::uint64_t seed, int in_channels,
                        int hidden, int embed_dim) {
    SkeletonNet<float> net(in_channels, hidden, embed_dim);
    net.init_params(seed);
    return bundle_from_skeleton(mode, net);
}

ModelBundle bundle_from_skeleton(TrainMode mode,
                                 const SkeletonNet<float>& skeleton) {
    ModelBundle bundle{mode, skeleton, skeleton};
    return bundle;
}

namespace {

std::vector<TensorRef<float>> head_tensors(ClassifierHead<float>& head) {
    return {{"head.weights", &head.w, &head.gw},
            {"head.bias", &head.b, &head.gb}};
}

// values (and only values) of src tensors copied onto dst.
void copy_tensors(SkeletonNet<float>& src, SkeletonNet<float>& dst) {
    auto from = src.all_tensors();
    auto to = dst.all_tensors();
    for (std::size_t i = 0; i < from.size(); ++i) {
        *to[i].value = *from[i].value;
    }
}

}  // namespace

Batch<float> gather_mel_batch(const TrainingPool& pool,
                              const std::vector<int>& items) {
    if (items.empty()) throw ConfigError("gather_mel_batch: empty batch");
    Batch<float> x(static_cast<int>(items.size()), pool.bands(), pool.frames());
    for (std::size_t i = 0; i < items.size(); ++i) {
        mel_into_batch(pool.mel(items[i]), x, static_cast<int>(i));
    }
    return x;
}

std::vector<EmbeddingVector> embed_items(SkeletonNet<float>& net,
                                         const TrainingPool& pool,
                                         const std::vector<int>& items,
                                         Phase phase,
                                         std::uint64_t dropout_seed) {
    Batch<float> x = gather_mel_batch(pool, items);
    Batch<float> y = net.forward(x, phase, dropout_seed);
    std::vector<EmbeddingVector> out(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        out[i].assign(y.row(static_cast<int>(i), 0),
                      y.row(static_cast<int>(i), 0) + y.ch);
    }
    return out;
}

PretrainResult pretrain_classifier(const TrainingPool& pool,
                                   const PretrainConfig& cfg) {
    const std::vector<int>& items = pool.domain_items(cfg.domain);
    if (items.empty()) {
        throw ConfigError(std::string("pretrain_classifier: pool has no ") +
                          domain_name(cfg.domain) + " items");
    }
    if (cfg.epochs < 1) throw ConfigError("pretrain_classifier: epochs < 1");

    // Roster restricted to singers actually present in the chosen domain.
    std::set<int> roster_set;
    for (int idx : items) {
        roster_set.insert(pool.singer_index(pool.item(idx).singer_id()));
    }
    std::vector<int> roster(roster_set.begin(), roster_set.end());
    if (roster.size() < 2) {
        throw ConfigError("pretrain_classifier: need at least 2 singers");
    }
    std::vector<int> class_of(pool.singers().size(), -1);
    for (std::size_t c = 0; c < roster.size(); ++c) {
        class_of[roster[c]] = static_cast<int>(c);
    }

    SkeletonNet<float> net(pool.bands(), cfg.hidden, cfg.embed_dim);
    net.init_params(derive_seed(cfg.seed, "pretrain-net"));
    ClassifierHead<float> head(static_cast<int>(roster.size()), cfg.embed_dim);
    Rng head_rng(derive_seed(cfg.seed, "pretrain-head"));
    head.init(head_rng);

    AdamSlots net_slots, head_slots;
    std::uint64_t t = 0;
    std::vector<double> curve;
    curve.reserve(cfg.epochs);
    const int batch = std::max(1, cfg.optimizer.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = items;
        Rng shuffle_rng(derive_seed(cfg.seed, "pretrain-epoch", epoch));
        shuffle_rng.shuffle(order);
        int steps = (static_cast<int>(order.size()) + batch - 1) / batch;
        if (cfg.max_steps_per_epoch > 0) {
            steps = std::min(steps, cfg.max_steps_per_epoch);
        }
        double loss_sum = 0.0;
        int n_examples = 0;
        for (int s = 0; s < steps; ++s) {
            const int begin = s * batch;
            const int end = std::min<int>(begin + batch,
                                          static_cast<int>(order.size()));
            const std::vector<int> chunk(order.begin() + begin,
                                         order.begin() + end);
            const int n = static_cast<int>(chunk.size());

            net.zero_grad();
            std::fill(head.gw.begin(), head.gw.end(), 0.0f);
            std::fill(head.gb.begin(), head.gb.end(), 0.0f);

            Batch<float> x = gather_mel_batch(pool, chunk);
            Batch<float> y = net.forward(x, Phase::train,
                                         derive_seed(cfg.seed, "pretrain-dropout", t));
            std::vector<float> logits = head.forward(y.v, n);

            std::vector<float> glogits(logits.size(), 0.0f);
            double batch_loss = 0.0;
            for (int i = 0; i < n; ++i) {
                const int target =
                    class_of[pool.singer_index(pool.item(chunk[i]).singer_id())];
                std::vector<float> row(logits.begin() + static_cast<std::ptrdiff_t>(i) * head.n_classes,
                                       logits.begin() + static_cast<std::ptrdiff_t>(i + 1) * head.n_classes);
                const std::vector<float> probs = softmax(row);
                batch_loss += cross_entropy_loss(probs, target);
                float* grow = glogits.data() +
                              static_cast<std::size_t>(i) * head.n_classes;
                for (int c = 0; c < head.n_classes; ++c) {
                    grow[c] = (probs[c] - (c == target ? 1.0f : 0.0f)) /
                              static_cast<float>(n);
                }
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericError("pretrain_classifier: non-finite loss at epoch " +
                                   std::to_string(epoch) + " step " +
                                   std::to_string(s));
            }
            std::vector<float> dflat = head.backward(glogits);
            Batch<float> dy(n, cfg.embed_dim, 1);
            dy.v = std::move(dflat);
            net.backward(dy);

            ++t;
            adam_step(net.parameters(), net_slots, t, cfg.optimizer);
            auto ht = head_tensors(head);
            adam_step(ht, head_slots, t, cfg.optimizer);

            loss_sum += batch_loss;
            n_examples += n;
        }
        curve.push_back(loss_sum / n_examples);
    }
    return PretrainResult{std::move(net), std::move(curve)};
}

TrainResult train_metric(ModelBundle& bundle, const TrainingPool& pool,
                         const TripletConfig& config,
                         const AdamConfig& optimizer,
                         const TrainSchedule& schedule,
                         const EpochCallback& on_epoch) {
    if (bundle.anchor_net.in_channels() != pool.bands() ||
        bundle.other_net.in_channels() != pool.bands()) {
        throw ConfigError("train_metric: network input channels != mel bands");
    }
    if (schedule.epochs < 1) throw ConfigError("train_metric: epochs < 1");
    TripletSampler sampler(pool, config);

    TripletScorer scorer;
    if (config.hard_negatives) {
        scorer = [&](int anchor_item, int candidate_item) {
            auto ea = embed_items(bundle.net_for(sampler.anchor_domain()), pool,
                                  {anchor_item}, Phase::infer, 0);
            auto ec = embed_items(bundle.net_for(sampler.other_domain()), pool,
                                  {candidate_item}, Phase::infer, 0);
            return cosine_similarity(ea[0], ec[0]);
        };
    }

    TrainState state;
    state.seed = config.seed;
    const int batch = std::max(1, optimizer.batch_size);
    const int emb = bundle.anchor_net.embed_dim();
    std::vector<double> curve;
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;

    for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
        std::vector<Triplet> triplets =
            sampler.sample_epoch(derive_seed(config.seed, "metric-epoch", epoch),
                                 scorer);
        if (schedule.max_steps_per_epoch > 0) {
            const std::size_t cap =
                static_cast<std::size_t>(schedule.max_steps_per_epoch) * batch;
            if (triplets.size() > cap) triplets.resize(cap);
        }
        double loss_sum = 0.0;
        std::size_t n_done = 0;
        while (n_done < triplets.size()) {
            const int n = static_cast<int>(
                std::min<std::size_t>(batch, triplets.size() - n_done));
            const Triplet* chunk = triplets.data() + n_done;
            const int n_neg = config.n_negatives;

            std::vector<int> anchor_items(n), other_items;
            other_items.reserve(static_cast<std::size_t>(n) * (1 + n_neg));
            for (int i = 0; i < n; ++i) anchor_items[i] = chunk[i].anchor;
            for (int i = 0; i < n; ++i) other_items.push_back(chunk[i].positive);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n_neg; ++j) {
                    other_items.push_back(chunk[i].negatives[j]);
                }
            }

            bundle.anchor_net.zero_grad();
            bundle.other_net.zero_grad();
            Batch<float> xa = gather_mel_batch(pool, anchor_items);
            Batch<float> xo = gather_mel_batch(pool, other_items);
            Batch<float> ya = bundle.anchor_net.forward(
                xa, Phase::train,
                derive_seed(config.seed, "dropout-anchor", state.step + 1));
            Batch<float> yo = bundle.other_net.forward(
                xo, Phase::train,
                derive_seed(config.seed, "dropout-other", state.step + 1));

            Batch<float> ga(ya.n, ya.ch, 1);
            Batch<float> go(yo.n, yo.ch, 1);
            double batch_loss = 0.0;
            const float inv_n = 1.0f / static_cast<float>(n);
            for (int i = 0; i < n; ++i) {
                EmbeddingVector ea(ya.row(i, 0), ya.row(i, 0) + emb);
                EmbeddingVector ep(yo.row(i, 0), yo.row(i, 0) + emb);
                std::vector<EmbeddingVector> en(n_neg);
                for (int j = 0; j < n_neg; ++j) {
                    const int r = n + i * n_neg + j;
                    en[j].assign(yo.row(r, 0), yo.row(r, 0) + emb);
                }
                EmbeddingVector gea(emb, 0.0f), gep(emb, 0.0f);
                std::vector<EmbeddingVector> gen(n_neg,
                                                 EmbeddingVector(emb, 0.0f));
                batch_loss += hinge_rank_loss_backward(ea, ep, en,
                                                       config.margin, gea, gep,
                                                       gen);
                for (int d = 0; d < emb; ++d) {
                    ga.row(i, 0)[d] = gea[d] * inv_n;
                    go.row(i, 0)[d] = gep[d] * inv_n;
                }
                for (int j = 0; j < n_neg; ++j) {
                    const int r = n + i * n_neg + j;
                    for (int d = 0; d < emb; ++d) {
                        go.row(r, 0)[d] = gen[j][d] * inv_n;
                    }
                }
            }
            batch_loss /= n;
            if (!std::isfinite(batch_loss)) {
                throw NumericError(
                    std::string("train_metric: non-finite loss (mode ") +
                    mode_name(config.mode) + ", epoch " +
                    std::to_string(epoch) + ", step " +
                    std::to_string(state.step) + ", triplets " +
                    std::to_string(n_done) + ".." +
                    std::to_string(n_done + n) + ")");
            }

            bundle.anchor_net.backward(ga);
            bundle.other_net.backward(go);
            ++state.step;
            if (bundle.shared()) {
                // One parameter set: role gradients add, one update, twin
                // re-synced (values and running statistics).
                auto pa = bundle.anchor_net.parameters();
                auto po = bundle.other_net.parameters();
                for (std::size_t p = 0; p < pa.size(); ++p) {
                    std::vector<float>& dst = *pa[p].grad;
                    const std::vector<float>& src = *po[p].grad;
                    for (std::size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += src[i];
                    }
                }
                adam_step(pa, state.anchor_slots, state.step, optimizer);
                copy_tensors(bundle.anchor_net, bundle.other_net);
            } else {
                adam_step(bundle.anchor_net.parameters(), state.anchor_slots,
                          state.step, optimizer);
                adam_step(bundle.other_net.parameters(), state.other_slots,
                          state.step, optimizer);
            }

            loss_sum += batch_loss * n;
            n_done += n;
        }
        const double epoch_loss = loss_sum / static_cast<double>(triplets.size());
        curve.push_back(epoch_loss);
        state.epoch = static_cast<std::uint64_t>(epoch) + 1;
        if (on_epoch) on_epoch(epoch, epoch_loss, bundle, state);

        if (best - epoch_loss >= schedule.early_stop_delta) {
            best = epoch_loss;
            stale = 0;
        } else {
            best = std::min(best, epoch_loss);
            ++stale;
            if (schedule.early_stop_patience > 0 &&
                stale >= schedule.early_stop_patience) {
                break;
            }
        }
    }
    return TrainResult{std::move(curve), std::move(state)};
}

namespace {

constexpr char kMagic[4] = {'M', '2', 'M', 'X'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void put_u32(std::ofstream& f, std::uint32_t v) { put_bytes(f, &v, 4); }
void put_u64(std::ofstream& f, std::uint64_t v) { put_bytes(f, &v, 8); }
void put_tensor(std::ofstream& f, const std::vector<float>& v) {
    put_u64(f, v.size());
    put_bytes(f, v.data(), v.size() * sizeof(float));
}

void get_bytes(std::ifstream& f, void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (f.gcount() != static_cast<std::streamsize>(n)) {
        throw DataError("checkpoint: truncated file");
    }
}
std::uint32_t get_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    get_bytes(f, &v, 4);
    return v;
}
std::uint64_t get_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    get_bytes(f, &v, 8);
    return v;
}
void get_tensor(std::ifstream& f, std::vector<float>& out,
                const std::string& name) {
    const std::uint64_t count = get_u64(f);
    if (count != out.size()) {
        throw DataError("checkpoint: tensor " + name + " has " +
                        std::to_string(count) + " values, expected " +
                        std::to_string(out.size()));
    }
    get_bytes(f, out.data(), out.size() * sizeof(float));
}

void put_slots(std::ofstream& f, SkeletonNet<float>& net,
               const AdamSlots& slots, const char* which) {
    auto params = net.parameters();
    if (slots.m.size() != params.size() || slots.v.size() != params.size()) {
        throw ConfigError(std::string("save_checkpoint: ") + which +
                          " optimizer buffers not shape-congruent");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        put_tensor(f, slots.m[p]);
        put_tensor(f, slots.v[p]);
    }
}

void get_slots(std::ifstream& f, SkeletonNet<float>& net, AdamSlots& slots) {
    auto params = net.parameters();
    slots.m.resize(params.size());
    slots.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        slots.m[p].assign(params[p].value->size(), 0.0f);
        slots.v[p].assign(params[p].value->size(), 0.0f);
        get_tensor(f, slots.m[p], params[p].name + ".m");
        get_tensor(f, slots.v[p], params[p].name + ".v");
    }
}

}  // namespace

void save_checkpoint(ModelBundle& bundle, const TrainState* state,
                     const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    put_bytes(f, kMagic, 4);
    put_u32(f, kVersion);
    const std::uint8_t mode = static_cast<std::uint8_t>(bundle.mode);
    const std::uint8_t has_state = state != nullptr ? 1 : 0;
    put_bytes(f, &mode, 1);
    put_bytes(f, &has_state, 1);
    put_u32(f, static_cast<std::uint32_t>(bundle.anchor_net.in_channels()));
    put_u32(f, static_cast<std::uint32_t>(bundle.anchor_net.hidden_channels()));
    put_u32(f, static_cast<std::uint32_t>(bundle.anchor_net.embed_dim()));
    for (const TensorRef<float>& ref : bundle.anchor_net.all_tensors()) {
        put_tensor(f, *ref.value);
    }
    if (!bundle.shared()) {
        for (const TensorRef<float>& ref : bundle.other_net.all_tensors()) {
            put_tensor(f, *ref.value);
        }
    }
    if (state != nullptr) {
        put_u64(f, state->step);
        put_u64(f, state->epoch);
        put_u64(f, state->seed);
        put_slots(f, bundle.anchor_net, state->anchor_slots, "anchor");
        if (!bundle.shared()) {
            put_slots(f, bundle.other_net, state->other_slots, "other");
        }
    }
    f.flush();
    if (!f.good()) throw DataError("save_checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    char magic[4] = {};
    get_bytes(f, magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("load_checkpoint: not a model checkpoint (bad magic)");
    }
    const std::uint32_t version = get_u32(f);
    if (version != kVersion) {
        throw DataError("load_checkpoint: unsupported version " +
                        std::to_string(version));
    }
    std::uint8_t mode_byte = 0, has_state = 0;
    get_bytes(f, &mode_byte, 1);
    get_bytes(f, &has_state, 1);
    if (mode_byte > 2) {
        throw DataError("load_checkpoint: invalid mode tag " +
                        std::to_string(mode_byte));
    }
    if (has_state > 1) {
        throw DataError("load_checkpoint: invalid state flag");
    }
    const TrainMode mode = static_cast<TrainMode>(mode_byte);
    const int in_ch = static_cast<int>(get_u32(f));
    const int hidden = static_cast<int>(get_u32(f));
    const int embed = static_cast<int>(get_u32(f));
    if (in_ch < 1 || hidden < 1 || embed < 1) {
        throw DataError("load_checkpoint: invalid geometry header");
    }

    SkeletonNet<float> anchor(in_ch, hidden, embed);
    for (TensorRef<float>& ref : anchor.all_tensors()) {
        get_tensor(f, *ref.value, ref.name);
    }
    SkeletonNet<float> other = anchor;
    if (mode == TrainMode::cross) {
        for (TensorRef<float>& ref : other.all_tensors()) {
            get_tensor(f, *ref.value, std::string("other.") + ref.name);
        }
    }
    Checkpoint out{ModelBundle{mode, std::move(anchor), std::move(other)},
                   std::nullopt};
    if (has_state == 1) {
        TrainState state;
        state.step = get_u64(f);
        state.epoch = get_u64(f);
        state.seed = get_u64(f);
        get_slots(f, out.bundle.anchor_net, state.anchor_slots);
        if (mode == TrainMode::cross) {
            get_slots(f, out.bundle.other_net, state.other_slots);
        }
        out.state = std::move(state);
    }
    if (f.peek() != std::ifstream::traits_type::eof()) {
        throw DataError("load_checkpoint: trailing bytes after checkpoint");
    }
    return out;
}

}  // namespace m2m
