#include "gateway/vpn.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace gateway {

std::string_view to_string(EgressMode m)
{
    switch (m) {
    case EgressMode::auto_detect: return "auto_detect";
    case EgressMode::named_interface: return "named_interface";
    case EgressMode::bind_address: return "bind_address";
    case EgressMode::system_default: return "system_default";
    }
    return "unknown";
}

std::optional<EgressMode> parse_egress_mode(std::string_view s)
{
    for (auto m : {EgressMode::auto_detect, EgressMode::named_interface, EgressMode::bind_address,
                   EgressMode::system_default}) {
        if (to_string(m) == s)
            return m;
    }
    return std::nullopt;
}

std::string EgressSelector::validation_error() const
{
    switch (mode) {
    case EgressMode::named_interface:
        return value.empty() ? "named_interface egress requires an interface name" : "";
    case EgressMode::bind_address:
        if (value.empty())
            return "bind_address egress requires an address";
        return Ipv4Address::parse(value) ? "" : fmt::format("'{}' is not an IPv4 address", value);
    case EgressMode::auto_detect:
    case EgressMode::system_default:
        return value.empty() ? "" : fmt::format("{} egress takes no value", to_string(mode));
    }
    return "unknown egress mode";
}

namespace {

bool usable(const InterfaceInfo& iface)
{
    return iface.up && !iface.addresses.empty();
}

} // namespace

VpnStatus detect_vpn(std::span<const InterfaceInfo> interfaces, const EgressSelector& egress, Timestamp now,
                     std::vector<std::string>* warnings)
{
    VpnStatus status;
    status.detected_at = now;

    if (egress.mode == EgressMode::named_interface) {
        auto it = std::find_if(interfaces.begin(), interfaces.end(),
                               [&](const InterfaceInfo& i) { return i.name == egress.value; });
        if (it != interfaces.end() && usable(*it)) {
            status.active = true;
            status.interface_name = it->name;
        } else if (warnings) {
            warnings->push_back(fmt::format("configured egress interface '{}' is {}", egress.value,
                                            it == interfaces.end() ? "absent" : "down or unaddressed"));
        }
        return status;
    }

    for (std::string_view prefix : kTunnelPrefixes) {
        for (const auto& iface : interfaces) {
            if (!usable(iface))
                continue;
            if (to_lower(iface.name).starts_with(prefix)) {
                status.active = true;
                status.interface_name = iface.name;
                return status;
            }
        }
    }
    return status;
}

VpnStatus detect_vpn(const EgressSelector& egress, Timestamp now, std::vector<std::string>* warnings)
{
    try {
        auto table = list_interfaces();
        return detect_vpn(table, egress, now, warnings);
    } catch (const NetError& e) {
        if (warnings)
            warnings->push_back(fmt::format("interface enumeration failed: {}", e.what()));
        VpnStatus status;
        status.detected_at = now;
        return status;
    }
}

std::string EgressBinding::describe() const
{
    if (interface)
        return fmt::format("interface {}", *interface);
    if (address)
        return fmt::format("address {}", address->to_string());
    return "system default route";
}

EgressBinding resolve_egress(const EgressSelector& egress, const VpnStatus& vpn)
{
    EgressBinding binding;
    switch (egress.mode) {
    case EgressMode::system_default:
        break;
    case EgressMode::bind_address:
        binding.address = Ipv4Address::parse(egress.value);
        break;
    case EgressMode::named_interface:
        binding.interface = egress.value;
        break;
    case EgressMode::auto_detect:
        if (vpn.active)
            binding.interface = vpn.interface_name;
        break;
    }
    return binding;
}

} // namespace gateway
