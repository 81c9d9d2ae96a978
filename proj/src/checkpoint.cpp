#include "mrmotion/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mrmotion::training {

namespace {

constexpr char kMagic[8] = {'M', 'C', 'K', 'P', 'T', '0', '0', '1'};

void collect(nlohmann::json& entries, std::vector<const NamedBlob*>& order,
             const std::string& prefix, const std::map<std::string, NamedBlob>& blobs,
             int64_t& offset) {
    for (const auto& [name, blob] : blobs) {
        const std::string key = prefix + name;
        entries[key] = {{"shape", blob.shape}, {"offset", offset}};
        order.push_back(&blob);
        offset += static_cast<int64_t>(blob.data.size() * sizeof(float));
    }
}

std::map<std::string, NamedBlob> extract(const nlohmann::json& entries,
                                         const std::string& prefix,
                                         const std::vector<char>& blob_bytes,
                                         const std::string& path) {
    std::map<std::string, NamedBlob> out;
    for (const auto& [key, meta] : entries.items()) {
        if (key.rfind(prefix, 0) != 0) continue;
        NamedBlob b;
        b.shape = meta.at("shape").get<std::vector<int64_t>>();
        int64_t numel = 1;
        for (auto d : b.shape) numel *= d;
        const int64_t offset = meta.at("offset").get<int64_t>();
        const int64_t bytes = numel * static_cast<int64_t>(sizeof(float));
        if (offset < 0 || offset + bytes > static_cast<int64_t>(blob_bytes.size()))
            throw IoError("checkpoint blob '" + key + "' overruns file in " + path);
        b.data.resize(static_cast<size_t>(numel));
        std::memcpy(b.data.data(), blob_bytes.data() + offset, static_cast<size_t>(bytes));
        out[key.substr(prefix.size())] = std::move(b);
    }
    return out;
}

} // namespace

void Checkpoint::save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["net_config"] = nlohmann::json::parse(net.to_json());
    manifest["arch_hash"] = net.arch_hash();
    manifest["epoch"] = epoch;
    manifest["adam_t"] = adam_t;
    manifest["best_val_loss"] = best_val_loss;
    auto& cj = manifest["curves"] = nlohmann::json::array();
    for (const auto& c : curves)
        cj.push_back({{"epoch", c.epoch}, {"lr", c.lr}, {"train_loss", c.train_loss}, {"val_loss", c.val_loss}});

    nlohmann::json entries;
    std::vector<const NamedBlob*> order;
    int64_t offset = 0;
    collect(entries, order, "p.", params, offset);
    collect(entries, order, "m.", adam_m, offset);
    collect(entries, order, "v.", adam_v, offset);
    collect(entries, order, "bm.", bn_mean, offset);
    collect(entries, order, "bv.", bn_var, offset);
    manifest["entries"] = entries;

    const std::string ms = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 8);
    const uint32_t n = static_cast<uint32_t>(ms.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    f.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (const NamedBlob* b : order)
        f.write(reinterpret_cast<const char*>(b->data.data()),
                static_cast<std::streamsize>(b->data.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path);
    const int64_t file_size = static_cast<int64_t>(f.tellg());
    f.seekg(0);
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("bad checkpoint magic at byte offset 0 in " + path);
    uint32_t mlen = 0;
    if (!f.read(reinterpret_cast<char*>(&mlen), 4))
        throw IoError("truncated manifest length in " + path);
    if (12 + static_cast<int64_t>(mlen) > file_size)
        throw IoError("manifest overruns file in " + path);
    std::string ms(mlen, '\0');
    if (!f.read(ms.data(), mlen)) throw IoError("truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(ms);
    } catch (const std::exception& e) {
        throw IoError("checkpoint manifest parse error in " + path + ": " + e.what());
    }

    std::vector<char> blob_bytes(static_cast<size_t>(file_size - 12 - mlen));
    if (!blob_bytes.empty() &&
        !f.read(blob_bytes.data(), static_cast<std::streamsize>(blob_bytes.size())))
        throw IoError("truncated blobs in " + path);

    Checkpoint c;
    try {
        c.net = model::NetConfig::from_json(manifest.at("net_config").dump());
        c.epoch = manifest.at("epoch").get<int64_t>();
        c.adam_t = manifest.at("adam_t").get<int64_t>();
        c.best_val_loss = manifest.value("best_val_loss", 0.0);
        for (const auto& e : manifest.value("curves", nlohmann::json::array()))
            c.curves.push_back({e.at("epoch").get<int64_t>(), e.at("lr").get<double>(),
                                e.at("train_loss").get<double>(), e.at("val_loss").get<double>()});
        const auto& entries = manifest.at("entries");
        c.params = extract(entries, "p.", blob_bytes, path);
        c.adam_m = extract(entries, "m.", blob_bytes, path);
        c.adam_v = extract(entries, "v.", blob_bytes, path);
        c.bn_mean = extract(entries, "bm.", blob_bytes, path);
        c.bn_var = extract(entries, "bv.", blob_bytes, path);
        const uint64_t h = manifest.at("arch_hash").get<uint64_t>();
        if (h != c.net.arch_hash())
            throw IoError("architecture hash mismatch in " + path);
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("malformed checkpoint manifest in " + path + ": " + e.what());
    }
    return c;
}

Checkpoint Checkpoint::snapshot(const model::StackedModel<float>& m,
                                const ad::AdamState<float>& adam, int64_t epoch,
                                const std::vector<EpochStats>& curves, double best_val) {
    Checkpoint c;
    c.net = m.config();
    c.epoch = epoch;
    c.adam_t = adam.t;
    c.curves = curves;
    c.best_val_loss = best_val;
    for (const auto& [name, t] : m.params().items())
        c.params[name] = NamedBlob{t.shape(), t.value()};
    for (const auto& [name, mom] : adam.m)
        c.adam_m[name] = NamedBlob{{static_cast<int64_t>(mom.size())}, mom};
    for (const auto& [name, mom] : adam.v)
        c.adam_v[name] = NamedBlob{{static_cast<int64_t>(mom.size())}, mom};
    for (const auto& [name, stats] : m.buffers()) {
        c.bn_mean[name] =
            NamedBlob{{static_cast<int64_t>(stats.running_mean.size())}, stats.running_mean};
        c.bn_var[name] =
            NamedBlob{{static_cast<int64_t>(stats.running_var.size())}, stats.running_var};
    }
    return c;
}

void Checkpoint::restore(model::StackedModel<float>& m, ad::AdamState<float>& adam) const {
    if (m.config().arch_hash() != net.arch_hash())
        throw ValidationError("checkpoint restore: architecture hash mismatch");
    for (auto& [name, t] : m.params().items()) {
        auto it = params.find(name);
        if (it == params.end())
            throw ValidationError("checkpoint restore: missing parameter " + name);
        if (it->second.shape != t.shape())
            throw ValidationError("checkpoint restore: shape mismatch for " + name);
        t.value() = it->second.data;
    }
    adam.t = adam_t;
    adam.m.clear();
    adam.v.clear();
    for (const auto& [name, b] : adam_m) adam.m[name] = b.data;
    for (const auto& [name, b] : adam_v) adam.v[name] = b.data;
    for (auto& [name, stats] : m.buffers()) {
        auto im = bn_mean.find(name);
        auto iv = bn_var.find(name);
        if (im == bn_mean.end() || iv == bn_var.end())
            throw ValidationError("checkpoint restore: missing batch-norm stats for " + name);
        stats.running_mean = im->second.data;
        stats.running_var = iv->second.data;
    }
}

std::string Checkpoint::curves_csv() const {
    std::ostringstream os;
    os.precision(12);
    os << "epoch,lr,train_loss,val_loss\n";
    for (const auto& c : curves)
        os << c.epoch << "," << c.lr << "," << c.train_loss << "," << c.val_loss << "\n";
    return os.str();
}

} // namespace mrmotion::training
