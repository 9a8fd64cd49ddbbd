#include "gateway/quota.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace gateway {

std::string_view to_string(QuotaMode m)
{
    return m == QuotaMode::dynamic ? "dynamic" : "fixed";
}

std::optional<QuotaMode> parse_quota_mode(std::string_view s)
{
    if (s == "dynamic")
        return QuotaMode::dynamic;
    if (s == "fixed")
        return QuotaMode::fixed;
    return std::nullopt;
}

std::string QuotaPolicy::validation_error() const
{
    if (mode == QuotaMode::dynamic && total_quota_bytes == 0)
        return "total_quota_bytes: must be > 0 in dynamic mode";
    if (mode == QuotaMode::fixed && per_client_quota_bytes == 0)
        return "per_client_quota_bytes: must be > 0 in fixed mode";
    if (cooldown <= Millis::zero())
        return "cooldown: must be > 0";
    return {};
}

AllocationState compute_allocations(const QuotaPolicy& policy, std::span<const Ipv4Address> active_clients,
                                    const AllocationState& previous)
{
    AllocationState state;
    const std::uint64_t k = active_clients.size();
    if (k == 0)
        return state;

    const std::uint64_t share = policy.total_quota_bytes / k;
    const std::uint64_t remainder = policy.total_quota_bytes % k;

    for (std::uint64_t i = 0; i < k; ++i) {
        const auto ip = active_clients[i];
        ClientAllocation alloc;
        if (auto it = previous.find(ip); it != previous.end())
            alloc = it->second;
        if (policy.mode == QuotaMode::dynamic)
            alloc.allocated_bytes = share + (i < remainder ? 1 : 0);
        else
            alloc.allocated_bytes = policy.per_client_quota_bytes;
        state[ip] = alloc;
    }
    return state;
}

void to_json(nlohmann::json& j, const QuotaPolicy& p)
{
    j = nlohmann::json{{"mode", to_string(p.mode)},
                       {"total_quota_bytes", p.total_quota_bytes},
                       {"per_client_quota_bytes", p.per_client_quota_bytes},
                       {"cooldown_ms", p.cooldown.count()},
                       {"accounting_scope", "up_plus_down"}};
}

QuotaPolicy quota_policy_from_json(const nlohmann::json& j)
{
    if (!j.is_object())
        throw std::invalid_argument("policy: must be a JSON object");
    QuotaPolicy p;
    if (auto it = j.find("mode"); it != j.end()) {
        auto m = it->is_string() ? parse_quota_mode(it->get<std::string>()) : std::nullopt;
        if (!m)
            throw std::invalid_argument("mode: must be \"dynamic\" or \"fixed\"");
        p.mode = *m;
    }
    auto read_count = [&](const char* key, std::uint64_t& out) {
        if (auto it = j.find(key); it != j.end()) {
            if (!it->is_number_integer() || it->get<long long>() < 0)
                throw std::invalid_argument(fmt::format("{}: must be a non-negative integer", key));
            out = it->get<std::uint64_t>();
        }
    };
    read_count("total_quota_bytes", p.total_quota_bytes);
    read_count("per_client_quota_bytes", p.per_client_quota_bytes);
    if (auto it = j.find("cooldown_ms"); it != j.end()) {
        if (!it->is_number_integer())
            throw std::invalid_argument("cooldown_ms: must be an integer");
        p.cooldown = Millis{it->get<long long>()};
    }
    if (auto it = j.find("accounting_scope"); it != j.end() && *it != "up_plus_down")
        throw std::invalid_argument("accounting_scope: only \"up_plus_down\" is supported");
    if (auto err = p.validation_error(); !err.empty())
        throw std::invalid_argument(err);
    return p;
}

} // namespace gateway
