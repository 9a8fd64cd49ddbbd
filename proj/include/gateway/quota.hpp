#pragma once

#include "gateway/common.hpp"

#include <map>
#include <span>

#include <nlohmann/json_fwd.hpp>

namespace gateway {

enum class QuotaMode { dynamic, fixed };

std::string_view to_string(QuotaMode m);
std::optional<QuotaMode> parse_quota_mode(std::string_view s);

/// Quota accounting always counts upload plus download bytes.
struct QuotaPolicy {
    QuotaMode mode = QuotaMode::dynamic;
    std::uint64_t total_quota_bytes = 10'000'000'000;   // dynamic mode
    std::uint64_t per_client_quota_bytes = 1'000'000'000; // fixed mode
    Millis cooldown{5 * 60 * 1000};

    /// Empty when valid; otherwise "<field>: <problem>".
    std::string validation_error() const;

    friend bool operator==(const QuotaPolicy&, const QuotaPolicy&) = default;
};

struct ClientAllocation {
    std::uint64_t allocated_bytes = 0;
    std::uint64_t used_bytes = 0;
    std::optional<Timestamp> blocked_until;

    friend bool operator==(const ClientAllocation&, const ClientAllocation&) = default;
};

using AllocationState = std::map<Ipv4Address, ClientAllocation>;

/// Allocations for `active_clients` (ordered by first_seen). Dynamic mode splits the total
/// equally with the integer remainder handed out one byte each to the earliest clients;
/// fixed mode gives everyone per_client_quota_bytes. used_bytes and blocked_until carry
/// over from `previous`.
AllocationState compute_allocations(const QuotaPolicy& policy, std::span<const Ipv4Address> active_clients,
                                    const AllocationState& previous = {});

void to_json(nlohmann::json& j, const QuotaPolicy& p);
/// Throws std::invalid_argument naming the offending field.
QuotaPolicy quota_policy_from_json(const nlohmann::json& j);

} // namespace gateway
