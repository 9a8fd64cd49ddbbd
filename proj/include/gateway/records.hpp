#pragma once

#include "gateway/common.hpp"

#include <nlohmann/json_fwd.hpp>

namespace gateway {

enum class DiscoverySource { probe, proxy_session };

std::string_view to_string(DiscoverySource s);

struct ClientRecord {
    Ipv4Address ip;
    std::string identifier;
    Timestamp first_seen{};
    Timestamp last_seen{};
    bool online = false;
    DiscoverySource discovery_source = DiscoverySource::proxy_session;

    friend bool operator==(const ClientRecord&, const ClientRecord&) = default;
};

/// One proxied connection. Counters are frozen once ended_at is set.
struct SessionRecord {
    std::string session_id;
    Ipv4Address client_ip;
    ProxyProtocol protocol = ProxyProtocol::http_connect;
    std::optional<TargetAddress> target;
    AdmissionDecision verdict;
    Timestamp started_at{};
    std::optional<Timestamp> ended_at;
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;

    friend bool operator==(const SessionRecord&, const SessionRecord&) = default;
};

void to_json(nlohmann::json& j, const ClientRecord& c);
void to_json(nlohmann::json& j, const SessionRecord& s);

} // namespace gateway
