#pragma once

#include "gateway/common.hpp"

#include <string>

namespace gateway {

struct ProvisioningInfo {
    Ipv4Address host;
    std::uint16_t http_port = 8080;
    std::uint16_t socks_port = 1080;
    std::optional<Credentials> credentials;
    std::string help_url;
    std::string pac_url;

    friend bool operator==(const ProvisioningInfo&, const ProvisioningInfo&) = default;
};

/// help_url/pac_url for a control listener at host:control_port.
ProvisioningInfo make_provisioning_info(Ipv4Address host, std::uint16_t http_port, std::uint16_t socks_port,
                                        std::uint16_t control_port, std::optional<Credentials> credentials);

/// DIRECT for plain hostnames, .local names, localhost and literal addresses inside `lan`;
/// "PROXY host:http; SOCKS5 host:socks" otherwise. Deterministic.
std::string generate_pac(const ProvisioningInfo& info, const Cidr& lan);

/// proxyshare://v1?host=..&http=..&socks=..[&user=..&pass=..]&help=..
std::string generate_qr_payload(const ProvisioningInfo& info);

/// Inverse of generate_qr_payload. pac_url is derived from the help_url origin.
std::optional<ProvisioningInfo> parse_qr_payload(std::string_view uri);

std::string percent_encode(std::string_view s);
std::optional<std::string> percent_decode(std::string_view s);

/// Static setup instructions for each client platform.
std::string render_help_page(const ProvisioningInfo& info);

} // namespace gateway
