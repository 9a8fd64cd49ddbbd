#pragma once

#include "gateway/common.hpp"
#include "gateway/net.hpp"

#include <span>
#include <string>
#include <vector>

namespace gateway {

enum class EgressMode { auto_detect, named_interface, bind_address, system_default };

std::string_view to_string(EgressMode m);
std::optional<EgressMode> parse_egress_mode(std::string_view s);

/// Where upstream sockets attach. named_interface and bind_address carry a value.
struct EgressSelector {
    EgressMode mode = EgressMode::auto_detect;
    std::string value;

    static EgressSelector system_default() { return {EgressMode::system_default, {}}; }
    static EgressSelector bind_to(Ipv4Address a) { return {EgressMode::bind_address, a.to_string()}; }
    static EgressSelector interface(std::string name) { return {EgressMode::named_interface, std::move(name)}; }

    /// Empty when valid; otherwise a description of the violated invariant.
    std::string validation_error() const;

    friend bool operator==(const EgressSelector&, const EgressSelector&) = default;
};

struct VpnStatus {
    bool active = false;
    std::optional<std::string> interface_name;
    Timestamp detected_at{};
};

/// Tunnel-name prefixes in precedence order (case-insensitive).
inline constexpr std::string_view kTunnelPrefixes[] = {"tun", "utun", "tap", "wg", "ppp", "tailscale"};

/// Picks the tunnel interface from `interfaces`. A named_interface egress overrides the
/// name heuristic. Diagnostics (e.g. a configured interface that is missing) go to `warnings`.
VpnStatus detect_vpn(std::span<const InterfaceInfo> interfaces, const EgressSelector& egress, Timestamp now,
                     std::vector<std::string>* warnings = nullptr);

/// Host variant: enumerates interfaces. Enumeration failure yields active=false and a warning.
VpnStatus detect_vpn(const EgressSelector& egress, Timestamp now, std::vector<std::string>* warnings = nullptr);

/// Concrete binding for upstream sockets, derived once from the selector and VPN status.
struct EgressBinding {
    std::optional<Ipv4Address> address;  ///< bind the local side to this address
    std::optional<std::string> interface; ///< resolve this interface's address at dial time

    bool is_default() const { return !address && !interface; }
    std::string describe() const;
};

EgressBinding resolve_egress(const EgressSelector& egress, const VpnStatus& vpn);

} // namespace gateway
