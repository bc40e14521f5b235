#include "specee/scheduler.hpp"

#include "specee/binio.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace specee {

void ScheduleConfig::validate(std::size_t num_layers) const
{
    if (queue_length < 1)
        throw std::invalid_argument("queue_length must be >= 1");
    if (num_layers < 1 || offline_top_k > num_layers - 1)
        throw std::invalid_argument("offline_top_k must be <= L-1");
}

OfflineProfile OfflineProfile::from_counts(std::vector<std::uint64_t> counts, std::uint64_t fingerprint)
{
    if (counts.empty())
        throw std::invalid_argument("profile needs at least one layer");
    OfflineProfile p;
    p.exit_counts = std::move(counts);
    p.fingerprint = fingerprint;
    p.ranked_layers.resize(p.exit_counts.size() - 1);
    std::iota(p.ranked_layers.begin(), p.ranked_layers.end(), std::size_t{0});
    std::stable_sort(p.ranked_layers.begin(), p.ranked_layers.end(),
                     [&](std::size_t a, std::size_t b) { return p.exit_counts[a] > p.exit_counts[b]; });
    return p;
}

OfflineProfile OfflineProfile::from_exit_layers(std::span<const std::size_t> exit_layers, std::size_t num_layers,
                                                std::uint64_t fingerprint)
{
    std::vector<std::uint64_t> counts(num_layers, 0);
    for (auto l : exit_layers) {
        if (l >= num_layers)
            throw std::out_of_range("exit layer out of range");
        ++counts[l];
    }
    return from_counts(std::move(counts), fingerprint);
}

OnlineState::OnlineState(std::size_t num_layers, std::size_t queue_length, std::size_t radius)
    : slots_(queue_length), radius_(radius), counts_(num_layers, 0)
{
    if (queue_length < 1)
        throw std::invalid_argument("queue_length must be >= 1");
    if (num_layers < 1)
        throw std::invalid_argument("num_layers must be >= 1");
}

void OnlineState::apply(std::size_t layer, int delta)
{
    const std::size_t lo = layer > radius_ ? layer - radius_ : 0;
    const std::size_t hi = std::min(counts_.size() - 1, layer + radius_);
    for (std::size_t i = lo; i <= hi; ++i)
        counts_[i] = static_cast<std::uint32_t>(static_cast<int>(counts_[i]) + delta);
}

void OnlineState::update(std::size_t exit_layer)
{
    if (exit_layer >= counts_.size())
        throw std::out_of_range("exit layer out of range");
    if (size_ == slots_.size())
        apply(slots_[head_], -1);
    else
        ++size_;
    slots_[head_] = exit_layer;
    apply(exit_layer, +1);
    head_ = (head_ + 1) % slots_.size();
}

std::vector<std::size_t> OnlineState::queue() const
{
    std::vector<std::size_t> out;
    const std::size_t start = (head_ + slots_.size() - size_) % slots_.size();
    for (std::size_t i = 0; i < size_; ++i)
        out.push_back(slots_[(start + i) % slots_.size()]);
    return out;
}

std::vector<std::uint32_t> OnlineState::recompute() const
{
    std::vector<std::uint32_t> counts(counts_.size(), 0);
    for (auto e : queue())
        for (std::size_t i = 0; i < counts.size(); ++i) {
            const std::size_t dist = i > e ? i - e : e - i;
            if (dist <= radius_)
                ++counts[i];
        }
    return counts;
}

std::vector<std::size_t> online_layers(const OnlineState& state)
{
    std::vector<std::size_t> out;
    const auto& counts = state.neighbor_counts();
    for (std::size_t i = 0; i + 1 < counts.size(); ++i)
        if (counts[i] > 0)
            out.push_back(i);
    return out;
}

std::vector<std::size_t> active_layers(const OfflineProfile& profile, const OnlineState& state,
                                       const ScheduleConfig& config)
{
    const std::size_t num_layers = state.num_layers();
    if (profile.num_layers() != num_layers)
        throw std::invalid_argument("profile and online state disagree on layer count");
    std::vector<bool> active(num_layers, false);
    const std::size_t top = std::min(config.offline_top_k, profile.ranked_layers.size());
    for (std::size_t i = 0; i < top; ++i)
        active[profile.ranked_layers[i]] = true;
    for (auto l : online_layers(state))
        active[l] = true;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i + 1 < num_layers; ++i)
        if (active[i])
            out.push_back(i);
    return out;
}

std::vector<char> serialize_profile(const OfflineProfile& profile)
{
    ByteWriter w;
    w.bytes("SPXS");
    w.u32(kProfileFileVersion);
    w.u32(static_cast<std::uint32_t>(profile.exit_counts.size()));
    for (auto c : profile.exit_counts)
        w.u64(c);
    w.u64(profile.fingerprint);
    return w.data();
}

OfflineProfile deserialize_profile(std::span<const char> bytes, std::optional<std::uint64_t> expected_fingerprint)
{
    ByteReader r(bytes);
    if (r.bytes(4) != "SPXS")
        throw FormatError("bad magic (expected SPXS)");
    if (const auto v = r.u32(); v != kProfileFileVersion)
        throw FormatError("unsupported profile version " + std::to_string(v));
    const std::uint32_t layers = r.u32();
    if (layers == 0)
        throw FormatError("profile has zero layers");
    if (r.remaining() != static_cast<std::size_t>(layers) * 8 + 8)
        throw FormatError("profile size does not match its layer count");
    std::vector<std::uint64_t> counts(layers);
    for (auto& c : counts)
        c = r.u64();
    const std::uint64_t fp = r.u64();
    if (expected_fingerprint && *expected_fingerprint != fp)
        throw FormatError("profile fingerprint does not match the loaded model");
    return OfflineProfile::from_counts(std::move(counts), fp);
}

void save_profile(const OfflineProfile& profile, const std::string& path)
{
    write_file(path, serialize_profile(profile));
}

OfflineProfile load_profile(const std::string& path, std::optional<std::uint64_t> expected_fingerprint)
{
    return deserialize_profile(read_file(path), expected_fingerprint);
}

}  // namespace specee
