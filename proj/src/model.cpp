#include "m2m/model.hpp"

namespace m2m {

EmbeddingVector forward_embed(SkeletonNet<float>& net,
                              const MelSpectrogram& mel, Phase phase,
                              std::uint64_t dropout_seed) {
    if (mel.bands != net.in_channels()) {
        throw ConfigError("forward_embed: shape mismatch, input has " +
                          std::to_string(mel.bands) + " bands, network wants " +
                          std::to_string(net.in_channels()));
    }
    if (mel.frames < 27) {
        throw ConfigError("forward_embed: shape mismatch, " +
                          std::to_string(mel.frames) +
                          " frames is too short for three pool stages");
    }
    Batch<float> x = mel_to_batch<float>(mel);
    Batch<float> y = net.forward(x, phase, dropout_seed);
    EmbeddingVector out(static_cast<std::size_t>(y.ch));
    for (int c = 0; c < y.ch; ++c) out[c] = y.at(0, c, 0);
    return out;
}

std::vector<float> forward_classify(SkeletonNet<float>& net,
                                    ClassifierHead<float>& head,
                                    const MelSpectrogram& mel) {
    EmbeddingVector emb = forward_embed(net, mel, Phase::infer, 0);
    std::vector<float> logits = head.forward(emb, 1);
    return softmax(logits);
}

}  // namespace m2m
