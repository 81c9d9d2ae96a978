#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrmotion/autodiff.hpp"
#include "mrmotion/model.hpp"

namespace mrmotion::training {

struct EpochStats {
    int64_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct NamedBlob {
    std::vector<int64_t> shape;
    std::vector<float> data;
};

// Resumable training state: parameters, optimizer moments, batch-norm
// running stats, epoch counter and the loss curves.
//
// .mckpt layout: magic "MCKPT001", u32 LE manifest length, JSON manifest
// (net config, epoch, adam scalars, curves, and per-blob name -> shape +
// byte offset), then the concatenated little-endian f32 blobs.
struct Checkpoint {
    model::NetConfig net;
    int64_t epoch = 0;  // epochs completed
    int64_t adam_t = 0; // optimizer steps taken
    std::map<std::string, NamedBlob> params;
    std::map<std::string, NamedBlob> adam_m;
    std::map<std::string, NamedBlob> adam_v;
    std::map<std::string, NamedBlob> bn_mean;
    std::map<std::string, NamedBlob> bn_var;
    std::vector<EpochStats> curves;
    double best_val_loss = 0.0;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    static Checkpoint snapshot(const model::StackedModel<float>& m,
                               const ad::AdamState<float>& adam, int64_t epoch,
                               const std::vector<EpochStats>& curves, double best_val);

    // Throws if the checkpoint's architecture hash does not match cfg of m.
    void restore(model::StackedModel<float>& m, ad::AdamState<float>& adam) const;

    std::string curves_csv() const; // epoch, lr, train_loss, val_loss
};

} // namespace mrmotion::training
