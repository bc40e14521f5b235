#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace specee {

struct ScheduleConfig {
    std::size_t queue_length = 5;  // N
    std::size_t radius = 2;
    std::size_t offline_top_k = 4;

    void validate(std::size_t num_layers) const;
};

/// Exit-frequency profile gathered once per model. ranked_layers covers
/// 0..L-2 only: the last layer never needs a predictor.
struct OfflineProfile {
    std::vector<std::uint64_t> exit_counts;  // length L
    std::vector<std::size_t> ranked_layers;  // count desc, then layer id asc
    std::uint64_t fingerprint = 0;

    std::size_t num_layers() const { return exit_counts.size(); }

    static OfflineProfile from_counts(std::vector<std::uint64_t> counts, std::uint64_t fingerprint);
    /// Counts one exit per entry; layers >= L are rejected.
    static OfflineProfile from_exit_layers(std::span<const std::size_t> exit_layers, std::size_t num_layers,
                                           std::uint64_t fingerprint);
};

/// Circular queue of the last N exit layers plus, per layer i, how many
/// queued exits lie within radius of i.
class OnlineState {
public:
    OnlineState(std::size_t num_layers, std::size_t queue_length, std::size_t radius);

    /// Pushes an exit layer, evicting the oldest entry once N are queued.
    void update(std::size_t exit_layer);

    const std::vector<std::uint32_t>& neighbor_counts() const { return counts_; }
    /// Queue contents, oldest first.
    std::vector<std::size_t> queue() const;
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    std::size_t num_layers() const { return counts_.size(); }
    std::size_t radius() const { return radius_; }
    std::size_t capacity() const { return slots_.size(); }

    /// Neighbor counts rebuilt from the queue contents.
    std::vector<std::uint32_t> recompute() const;

private:
    void apply(std::size_t layer, int delta);

    std::vector<std::size_t> slots_;
    std::size_t head_ = 0;  // next slot to write
    std::size_t size_ = 0;
    std::size_t radius_;
    std::vector<std::uint32_t> counts_;
};

/// Layers that run predictors for the next token: the offline top-k united
/// with every layer the online neighborhood touches, limited to [0, L-2],
/// ascending.
std::vector<std::size_t> active_layers(const OfflineProfile& profile, const OnlineState& state,
                                       const ScheduleConfig& config);

/// Only the online part of active_layers.
std::vector<std::size_t> online_layers(const OnlineState& state);

// Profile file (little-endian): "SPXS" u32 version u32 L u64 counts[L] u64 fingerprint
inline constexpr std::uint32_t kProfileFileVersion = 1;

std::vector<char> serialize_profile(const OfflineProfile& profile);
OfflineProfile deserialize_profile(std::span<const char> bytes,
                                   std::optional<std::uint64_t> expected_fingerprint = std::nullopt);
void save_profile(const OfflineProfile& profile, const std::string& path);
OfflineProfile load_profile(const std::string& path, std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

}  // namespace specee
