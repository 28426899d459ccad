#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "trendmatch/adam.hpp"
#include "trendmatch/distances.hpp"
#include "trendmatch/network.hpp"
#include "trendmatch/png_io.hpp"

namespace trendmatch {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'T', 'C', 'D', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

/// Everything needed to resume training or run inference.
///
/// Layout, all integers little-endian:
///   "TCDW" | u32 version
///   u32 depth | u32 base_channels | u32 feature_channels | u8 batchnorm | f64 tau | u8 gcd distance
///   tensor table (parameters) | tensor table (running stats)
///   u8 has_adam [ u64 step | f64 lr, beta1, beta2, eps | tensor table (m) | tensor table (v) ]
///   u32 rng length | rng bytes | u32 epoch | f64 best validation F
/// A tensor table is u32 count, then per tensor: u32 name length | name |
/// u32 rank | u32 dims... | f32 payload.
struct Checkpoint {
    NetConfig net;
    DistanceKind gcd_distance = DistanceKind::softmatch;
    std::vector<NamedTensor> params;
    std::vector<NamedTensor> buffers;
    std::optional<AdamHyper> adam_hyper;
    std::uint64_t adam_step = 0;
    std::vector<NamedTensor> adam_m, adam_v;
    std::string rng_state;
    std::uint32_t epoch = 0;
    double best_val_f = -1.0;
};

namespace detail {

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    template <typename V>
    void put(V v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof(V));
    }
    void bytes(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void table(const std::vector<NamedTensor>& ts) {
        put(static_cast<std::uint32_t>(ts.size()));
        for (const auto& t : ts) {
            bytes(t.name);
            put(static_cast<std::uint32_t>(t.shape.size()));
            for (auto d : t.shape) put(static_cast<std::uint32_t>(d));
            os_.write(reinterpret_cast<const char*>(t.values.data()),
                      static_cast<std::streamsize>(t.values.size() * sizeof(float)));
        }
    }

private:
    std::ostream& os_;
};

class Reader {
public:
    Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}
    template <typename V>
    V get() {
        V v{};
        raw(&v, sizeof(V));
        return v;
    }
    std::string bytes() {
        const auto n = get<std::uint32_t>();
        if (n > (1u << 24)) fail("implausible string length " + std::to_string(n));
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    std::vector<NamedTensor> table() {
        const auto count = get<std::uint32_t>();
        std::vector<NamedTensor> out;
        for (std::uint32_t i = 0; i < count; ++i) {
            NamedTensor t;
            t.name = bytes();
            const auto rank = get<std::uint32_t>();
            if (rank > 8) fail("tensor '" + t.name + "' has rank " + std::to_string(rank));
            for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(get<std::uint32_t>());
            const auto n = shape_numel(t.shape);
            if (n > (std::size_t{1} << 32)) fail("tensor '" + t.name + "' is too large");
            t.values.resize(n);
            raw(t.values.data(), n * sizeof(float));
            out.push_back(std::move(t));
        }
        return out;
    }
    [[noreturn]] void fail(const std::string& what) const { throw DataError(origin_ + ": " + what); }

private:
    void raw(void* dst, std::size_t n) {
        is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated checkpoint");
    }
    std::istream& is_;
    std::string origin_;
};

inline std::vector<NamedTensor> snapshot(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : named) {
        out.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    }
    return out;
}

inline std::vector<NamedTensor> snapshot_moments(const std::vector<std::pair<std::string, Tensor>>& named,
                                                 const std::vector<std::vector<float>>& moments) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < named.size(); ++i) {
        out.push_back({named[i].first, named[i].second.shape(), moments.at(i)});
    }
    return out;
}

// Copies table values into the matching model tensors; names and shapes must agree.
inline void restore(const std::vector<NamedTensor>& table, const std::vector<std::pair<std::string, Tensor>>& named,
                    const char* what) {
    if (table.size() != named.size()) {
        throw ConfigError(std::string("checkpoint ") + what + " table has " + std::to_string(table.size()) +
                          " entries, model expects " + std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& [name, t] = named[i];
        if (table[i].name != name || table[i].shape != t.shape()) {
            throw ConfigError(std::string("checkpoint ") + what + " entry '" + table[i].name + "' " +
                              shape_str(table[i].shape) + " does not match model '" + name + "' " +
                              shape_str(t.shape()));
        }
        Tensor handle = t;  // shares storage
        std::copy(table[i].values.begin(), table[i].values.end(), handle.data().begin());
    }
}

}  // namespace detail

/// Captures model weights, running stats and (optionally) optimizer moments.
inline Checkpoint make_checkpoint(const Model& model, DistanceKind gcd, const AdamState<float>* adam,
                                  std::string rng_state, std::uint32_t epoch, double best_val_f) {
    Checkpoint c;
    c.net = model.config();
    c.gcd_distance = gcd;
    c.params = detail::snapshot(model.named_parameters());
    c.buffers = detail::snapshot(model.named_buffers());
    if (adam) {
        c.adam_hyper = adam->hyper;
        c.adam_step = adam->step;
        c.adam_m = detail::snapshot_moments(model.named_parameters(), adam->m);
        c.adam_v = detail::snapshot_moments(model.named_parameters(), adam->v);
    }
    c.rng_state = std::move(rng_state);
    c.epoch = epoch;
    c.best_val_f = best_val_f;
    return c;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
    detail::Writer w(os);
    os.write(kCheckpointMagic, 4);
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(c.net.depth));
    w.put(static_cast<std::uint32_t>(c.net.base_channels));
    w.put(static_cast<std::uint32_t>(c.net.feature_channels));
    w.put(static_cast<std::uint8_t>(c.net.use_batchnorm));
    w.put(c.net.tau);
    w.put(static_cast<std::uint8_t>(c.gcd_distance));
    w.table(c.params);
    w.table(c.buffers);
    w.put(static_cast<std::uint8_t>(c.adam_hyper.has_value()));
    if (c.adam_hyper) {
        w.put(c.adam_step);
        w.put(c.adam_hyper->lr);
        w.put(c.adam_hyper->beta1);
        w.put(c.adam_hyper->beta2);
        w.put(c.adam_hyper->epsilon);
        w.table(c.adam_m);
        w.table(c.adam_v);
    }
    w.bytes(c.rng_state);
    w.put(c.epoch);
    w.put(c.best_val_f);
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& origin = "checkpoint") {
    detail::Reader r(is, origin);
    char magic[4];
    for (char& m : magic) m = r.get<char>();
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("not a TCDW checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        r.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
               std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    c.net.depth = r.get<std::uint32_t>();
    c.net.base_channels = r.get<std::uint32_t>();
    c.net.feature_channels = r.get<std::uint32_t>();
    c.net.use_batchnorm = r.get<std::uint8_t>() != 0;
    c.net.tau = r.get<double>();
    const auto kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(DistanceKind::euclidean)) r.fail("bad distance tag");
    c.gcd_distance = static_cast<DistanceKind>(kind);
    c.params = r.table();
    c.buffers = r.table();
    if (r.get<std::uint8_t>()) {
        c.adam_step = r.get<std::uint64_t>();
        AdamHyper h;
        h.lr = r.get<double>();
        h.beta1 = r.get<double>();
        h.beta2 = r.get<double>();
        h.epsilon = r.get<double>();
        c.adam_hyper = h;
        c.adam_m = r.table();
        c.adam_v = r.table();
    }
    c.rng_state = r.bytes();
    c.epoch = r.get<std::uint32_t>();
    c.best_val_f = r.get<double>();
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot write " + tmp);
        write_checkpoint(os, c);
        if (!os) throw DataError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint " + path.string());
    return read_checkpoint(is, path.string());
}

/// Builds a model with the checkpoint's architecture and weights.
inline Model model_from(const Checkpoint& c) {
    c.net.validate();
    Model m = Model::init(c.net, 0);
    detail::restore(c.params, m.named_parameters(), "parameter");
    detail::restore(c.buffers, m.named_buffers(), "running-stat");
    return m;
}

/// Optimizer state matching `model`'s parameter order; fresh if none was saved.
inline AdamState<float> adam_from(const Checkpoint& c, const Model& model, AdamHyper fallback) {
    AdamState<float> st(model.parameters(), c.adam_hyper.value_or(fallback));
    if (!c.adam_hyper) return st;
    st.step = c.adam_step;
    const auto& named = model.named_parameters();
    if (c.adam_m.size() != named.size() || c.adam_v.size() != named.size()) {
        throw ConfigError("checkpoint optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (c.adam_m[i].values.size() != st.m[i].size() || c.adam_v[i].values.size() != st.v[i].size()) {
            throw ConfigError("checkpoint optimizer moment '" + c.adam_m[i].name + "' has the wrong size");
        }
        st.m[i] = c.adam_m[i].values;
        st.v[i] = c.adam_v[i].values;
    }
    return st;
}

}  // namespace trendmatch
