#include "gateway/provisioning.hpp"

#include <charconv>
#include <map>

#include <fmt/format.h>

namespace gateway {

namespace {

std::string html_escape(std::string_view s)
{
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        case '\'': out += "&#39;"; break;
        default: out += c;
        }
    }
    return out;
}

std::optional<std::uint16_t> parse_port(std::string_view s)
{
    std::uint32_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v == 0 || v > 65535)
        return std::nullopt;
    return static_cast<std::uint16_t>(v);
}

/// "http://h:p/help" -> "http://h:p"
std::string origin_of(std::string_view url)
{
    auto scheme = url.find("://");
    if (scheme == std::string_view::npos)
        return std::string(url);
    auto slash = url.find('/', scheme + 3);
    return std::string(url.substr(0, slash));
}

} // namespace

ProvisioningInfo make_provisioning_info(Ipv4Address host, std::uint16_t http_port, std::uint16_t socks_port,
                                        std::uint16_t control_port, std::optional<Credentials> credentials)
{
    ProvisioningInfo info;
    info.host = host;
    info.http_port = http_port;
    info.socks_port = socks_port;
    info.credentials = std::move(credentials);
    const auto origin = fmt::format("http://{}:{}", host.to_string(), control_port);
    info.help_url = origin + "/help";
    info.pac_url = origin + "/proxy.pac";
    return info;
}

std::string generate_pac(const ProvisioningInfo& info, const Cidr& lan)
{
    const auto host = info.host.to_string();
    return fmt::format(
        "// Proxy auto-config for the shared VPN gateway at {0}.\n"
        "function FindProxyForURL(url, host) {{\n"
        "    if (isPlainHostName(host) || host == \"localhost\" || dnsDomainIs(host, \".local\"))\n"
        "        return \"DIRECT\";\n"
        "    if (/^\\d+\\.\\d+\\.\\d+\\.\\d+$/.test(host) &&\n"
        "        (isInNet(host, \"{3}\", \"{4}\") || isInNet(host, \"127.0.0.0\", \"255.0.0.0\")))\n"
        "        return \"DIRECT\";\n"
        "    return \"PROXY {0}:{1}; SOCKS5 {0}:{2}\";\n"
        "}}\n",
        host, info.http_port, info.socks_port, lan.network().to_string(), Ipv4Address{lan.netmask()}.to_string());
}

std::string percent_encode(std::string_view s)
{
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~')
            out += static_cast<char>(c);
        else
            out += fmt::format("%{:02X}", c);
    }
    return out;
}

std::optional<std::string> percent_decode(std::string_view s)
{
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '%') {
            out += s[i];
            continue;
        }
        if (i + 2 >= s.size())
            return std::nullopt;
        unsigned v = 0;
        auto [ptr, ec] = std::from_chars(s.data() + i + 1, s.data() + i + 3, v, 16);
        if (ec != std::errc{} || ptr != s.data() + i + 3)
            return std::nullopt;
        out += static_cast<char>(v);
        i += 2;
    }
    return out;
}

std::string generate_qr_payload(const ProvisioningInfo& info)
{
    std::string out = fmt::format("proxyshare://v1?host={}&http={}&socks={}", percent_encode(info.host.to_string()),
                                  info.http_port, info.socks_port);
    if (info.credentials) {
        out += "&user=" + percent_encode(info.credentials->username);
        out += "&pass=" + percent_encode(info.credentials->password);
    }
    out += "&help=" + percent_encode(info.help_url);
    return out;
}

std::optional<ProvisioningInfo> parse_qr_payload(std::string_view uri)
{
    constexpr std::string_view prefix = "proxyshare://v1?";
    if (!uri.starts_with(prefix))
        return std::nullopt;
    std::map<std::string, std::string> params;
    for (const auto& pair : split_list(uri.substr(prefix.size()), '&')) {
        auto eq = pair.find('=');
        if (eq == std::string::npos)
            return std::nullopt;
        auto value = percent_decode(std::string_view(pair).substr(eq + 1));
        if (!value || !params.emplace(pair.substr(0, eq), *value).second)
            return std::nullopt;
    }
    auto host = params.count("host") ? Ipv4Address::parse(params["host"]) : std::nullopt;
    auto http = params.count("http") ? parse_port(params["http"]) : std::nullopt;
    auto socks = params.count("socks") ? parse_port(params["socks"]) : std::nullopt;
    if (!host || !http || !socks || !params.count("help"))
        return std::nullopt;
    if (params.count("user") != params.count("pass"))
        return std::nullopt;

    ProvisioningInfo info;
    info.host = *host;
    info.http_port = *http;
    info.socks_port = *socks;
    if (params.count("user"))
        info.credentials = Credentials{params["user"], params["pass"]};
    info.help_url = params["help"];
    info.pac_url = origin_of(info.help_url) + "/proxy.pac";
    return info;
}

std::string render_help_page(const ProvisioningInfo& info)
{
    const auto host = html_escape(info.host.to_string());
    const auto pac = html_escape(info.pac_url);
    std::string creds;
    if (info.credentials) {
        creds = fmt::format("<p>This gateway requires credentials. Username: <code>{}</code>, password: "
                            "<code>{}</code>.</p>\n",
                            html_escape(info.credentials->username), html_escape(info.credentials->password));
    } else {
        creds = "<p>No credentials are required.</p>\n";
    }

    return fmt::format(R"(<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<meta name="viewport" content="width=device-width, initial-scale=1">
<title>Connect through the shared VPN</title>
<style>
body {{ font-family: sans-serif; max-width: 46em; margin: 1em auto; padding: 0 1em; line-height: 1.45; }}
code {{ background: #eee; padding: 0 .25em; }}
h2 {{ border-bottom: 1px solid #ccc; }}
</style>
</head>
<body>
<h1>Connect through the shared VPN</h1>
<p>Join this device's hotspot, then point your device at the proxy below.</p>
<table>
<tr><th align="left">HTTP / HTTPS proxy</th><td><code>{host}:{http}</code></td></tr>
<tr><th align="left">SOCKS5 proxy</th><td><code>{host}:{socks}</code></td></tr>
<tr><th align="left">Automatic configuration (PAC)</th><td><a href="{pac}"><code>{pac}</code></a></td></tr>
</table>
{creds}
<h2>Android</h2>
<ol>
<li>Settings &rarr; Wi-Fi, long-press the hotspot network, choose <em>Modify network</em>.</li>
<li>Under <em>Advanced options</em> set Proxy to <em>Proxy Auto-Config</em> and enter <code>{pac}</code>,
or set it to <em>Manual</em> with host <code>{host}</code> and port <code>{http}</code>.</li>
</ol>
<h2>iOS / iPadOS</h2>
<ol>
<li>Settings &rarr; Wi-Fi, tap the (i) next to the hotspot network.</li>
<li>Configure Proxy &rarr; <em>Automatic</em> with URL <code>{pac}</code>,
or <em>Manual</em> with server <code>{host}</code> and port <code>{http}</code>.</li>
</ol>
<h2>Windows</h2>
<ol>
<li>Settings &rarr; Network &amp; Internet &rarr; Proxy.</li>
<li>Turn on <em>Use setup script</em> with address <code>{pac}</code>,
or use <em>Manual proxy setup</em> with <code>{host}</code> port <code>{http}</code>.</li>
</ol>
<h2>macOS</h2>
<ol>
<li>System Settings &rarr; Network &rarr; Wi-Fi &rarr; Details &rarr; Proxies.</li>
<li>Enable <em>Automatic proxy configuration</em> with <code>{pac}</code>,
or enable <em>Web proxy</em> and <em>Secure web proxy</em> with <code>{host}:{http}</code>.</li>
</ol>
<h2>Linux</h2>
<ol>
<li>GNOME: Settings &rarr; Network &rarr; Network Proxy &rarr; <em>Automatic</em> with <code>{pac}</code>.</li>
<li>Shell: <code>export http_proxy=http://{host}:{http} https_proxy=http://{host}:{http}</code></li>
</ol>
<h2>Browsers and apps with SOCKS support</h2>
<p>Use SOCKS version 5 at <code>{host}</code> port <code>{socks}</code>.</p>
<h2>Setup code</h2>
<p>Scanning the QR code on the gateway screen yields:</p>
<p><code>{qr}</code></p>
</body>
</html>
)",
                       fmt::arg("host", host), fmt::arg("http", info.http_port), fmt::arg("socks", info.socks_port),
                       fmt::arg("pac", pac), fmt::arg("creds", creds),
                       fmt::arg("qr", html_escape(generate_qr_payload(info))));
}

} // namespace gateway
