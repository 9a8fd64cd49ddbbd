#include "gateway/http_message.hpp"

#include <charconv>

#include <fmt/format.h>
#include <openssl/evp.h>

namespace gateway::http {

namespace {

bool iequals(std::string_view a, std::string_view b)
{
    if (a.size() != b.size())
        return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i])))
            return false;
    }
    return true;
}

bool is_token(std::string_view s)
{
    if (s.empty())
        return false;
    for (char c : s) {
        unsigned char u = static_cast<unsigned char>(c);
        if (u <= 32 || u >= 127 || std::string_view("()<>@,;:\\\"/[]?={}").find(c) != std::string_view::npos)
            return false;
    }
    return true;
}

std::vector<std::string_view> split_lines(std::string_view text)
{
    std::vector<std::string_view> lines;
    while (!text.empty()) {
        auto nl = text.find('\n');
        auto line = text.substr(0, nl);
        if (!line.empty() && line.back() == '\r')
            line.remove_suffix(1);
        lines.push_back(line);
        if (nl == std::string_view::npos)
            break;
        text.remove_prefix(nl + 1);
    }
    while (!lines.empty() && lines.back().empty())
        lines.pop_back();
    return lines;
}

bool parse_headers(const std::vector<std::string_view>& lines, std::vector<Header>& out)
{
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto line = lines[i];
        if (!line.empty() && (line.front() == ' ' || line.front() == '\t'))
            return false; // obsolete line folding
        auto colon = line.find(':');
        if (colon == std::string_view::npos)
            return false;
        auto name = line.substr(0, colon);
        if (!is_token(name))
            return false;
        out.push_back({std::string(name), std::string(trim(line.substr(colon + 1)))});
    }
    return true;
}

std::optional<std::string> find_header(const std::vector<Header>& headers, std::string_view name)
{
    for (const auto& h : headers) {
        if (iequals(h.name, name))
            return h.value;
    }
    return std::nullopt;
}

std::vector<std::string> header_tokens(const std::vector<Header>& headers, std::string_view name)
{
    std::vector<std::string> out;
    for (const auto& h : headers) {
        if (!iequals(h.name, name))
            continue;
        for (auto& t : split_list(h.value))
            out.push_back(to_lower(t));
    }
    return out;
}

bool has_token(const std::vector<std::string>& tokens, std::string_view t)
{
    return std::find(tokens.begin(), tokens.end(), t) != tokens.end();
}

bool valid_version(std::string_view v)
{
    return v == "HTTP/1.1" || v == "HTTP/1.0";
}

std::optional<std::uint64_t> content_length(const std::vector<Header>& headers)
{
    std::optional<std::uint64_t> found;
    for (const auto& h : headers) {
        if (!iequals(h.name, "content-length"))
            continue;
        std::uint64_t n = 0;
        auto v = trim(h.value);
        auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
        if (ec != std::errc{} || ptr != v.data() + v.size() || (found && *found != n))
            throw std::invalid_argument("content-length");
        found = n;
    }
    return found;
}

} // namespace

std::optional<std::string> RequestHead::header(std::string_view name) const
{
    return find_header(headers, name);
}

std::vector<std::string> RequestHead::tokens(std::string_view name) const
{
    return header_tokens(headers, name);
}

std::optional<std::string> ResponseHead::header(std::string_view name) const
{
    return find_header(headers, name);
}

std::vector<std::string> ResponseHead::tokens(std::string_view name) const
{
    return header_tokens(headers, name);
}

std::optional<RequestHead> parse_request_head(std::string_view text)
{
    auto lines = split_lines(text);
    if (lines.empty())
        return std::nullopt;
    auto first = lines[0];
    auto sp1 = first.find(' ');
    auto sp2 = first.rfind(' ');
    if (sp1 == std::string_view::npos || sp1 == sp2)
        return std::nullopt;
    RequestHead h;
    h.method = std::string(first.substr(0, sp1));
    h.target = std::string(trim(first.substr(sp1 + 1, sp2 - sp1 - 1)));
    h.version = std::string(first.substr(sp2 + 1));
    if (!is_token(h.method) || h.target.empty() || !valid_version(h.version))
        return std::nullopt;
    if (h.target.find(' ') != std::string::npos)
        return std::nullopt;
    if (!parse_headers(lines, h.headers))
        return std::nullopt;
    return h;
}

std::optional<ResponseHead> parse_response_head(std::string_view text)
{
    auto lines = split_lines(text);
    if (lines.empty())
        return std::nullopt;
    auto first = lines[0];
    auto sp1 = first.find(' ');
    if (sp1 == std::string_view::npos)
        return std::nullopt;
    ResponseHead h;
    h.version = std::string(first.substr(0, sp1));
    if (!valid_version(h.version))
        return std::nullopt;
    auto rest = first.substr(sp1 + 1);
    auto code = rest.substr(0, rest.find(' '));
    auto [ptr, ec] = std::from_chars(code.data(), code.data() + code.size(), h.status);
    if (ec != std::errc{} || ptr != code.data() + code.size() || code.size() != 3)
        return std::nullopt;
    if (auto sp = rest.find(' '); sp != std::string_view::npos)
        h.reason = std::string(rest.substr(sp + 1));
    if (!parse_headers(lines, h.headers))
        return std::nullopt;
    return h;
}

std::optional<TargetAddress> parse_authority(std::string_view authority)
{
    if (authority.empty() || authority.front() == '[')
        return std::nullopt;
    auto colon = authority.rfind(':');
    if (colon == std::string_view::npos)
        return std::nullopt;
    auto port_text = authority.substr(colon + 1);
    std::uint32_t port = 0;
    auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || ptr != port_text.data() + port_text.size())
        return std::nullopt;
    auto host = authority.substr(0, colon);
    if (host.find(':') != std::string_view::npos)
        return std::nullopt;
    return TargetAddress::make(host, port);
}

std::optional<AbsoluteUri> parse_absolute_uri(std::string_view uri)
{
    auto sep = uri.find("://");
    if (sep == std::string_view::npos || sep == 0)
        return std::nullopt;
    AbsoluteUri out;
    out.scheme = to_lower(uri.substr(0, sep));
    auto rest = uri.substr(sep + 3);
    auto slash = rest.find_first_of("/?#");
    out.authority = std::string(rest.substr(0, slash));
    std::string path(slash == std::string_view::npos ? std::string_view{} : rest.substr(slash));
    if (auto hash = path.find('#'); hash != std::string::npos)
        path.erase(hash);
    if (path.empty() || path.front() == '?')
        path.insert(0, "/");
    out.path_and_query = std::move(path);

    std::string_view hostport = out.authority;
    if (auto at = hostport.rfind('@'); at != std::string_view::npos)
        hostport.remove_prefix(at + 1); // userinfo is not forwarded
    if (hostport.empty() || hostport.front() == '[')
        return std::nullopt;
    std::uint32_t port = out.scheme == "https" ? 443 : 80;
    auto colon = hostport.rfind(':');
    std::string_view host = hostport;
    if (colon != std::string_view::npos) {
        auto p = hostport.substr(colon + 1);
        host = hostport.substr(0, colon);
        if (!p.empty()) {
            auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), port);
            if (ec != std::errc{} || ptr != p.data() + p.size())
                return std::nullopt;
        }
    }
    auto target = TargetAddress::make(host, port);
    if (!target)
        return std::nullopt;
    out.host = target->host;
    out.port = target->port;
    out.authority = std::string(hostport);
    return out;
}

std::string base64_encode(std::string_view in)
{
    std::string out(4 * ((in.size() + 2) / 3) + 1, '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                            reinterpret_cast<const unsigned char*>(in.data()), static_cast<int>(in.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::optional<std::string> base64_decode(std::string_view in)
{
    in = trim(in);
    if (in.size() % 4 != 0)
        return std::nullopt;
    std::string out(3 * in.size() / 4 + 1, '\0');
    int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                            reinterpret_cast<const unsigned char*>(in.data()), static_cast<int>(in.size()));
    if (n < 0)
        return std::nullopt;
    // EVP_DecodeBlock counts padding bytes as output.
    std::size_t pad = 0;
    if (!in.empty() && in.back() == '=')
        ++pad;
    if (in.size() > 1 && in[in.size() - 2] == '=')
        ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

std::optional<Credentials> parse_basic_credentials(std::string_view header_value)
{
    header_value = trim(header_value);
    auto sp = header_value.find(' ');
    if (sp == std::string_view::npos || !iequals(header_value.substr(0, sp), "basic"))
        return std::nullopt;
    auto decoded = base64_decode(header_value.substr(sp + 1));
    if (!decoded)
        return std::nullopt;
    auto colon = decoded->find(':');
    if (colon == std::string::npos)
        return std::nullopt;
    return Credentials{decoded->substr(0, colon), decoded->substr(colon + 1)};
}

std::string basic_credentials_header(const Credentials& c)
{
    return "Basic " + base64_encode(c.username + ":" + c.password);
}

bool is_hop_by_hop(std::string_view name)
{
    for (std::string_view h : {"connection", "proxy-connection", "keep-alive", "proxy-authorization",
                               "proxy-authenticate", "te", "trailer", "upgrade"}) {
        if (iequals(name, h))
            return true;
    }
    return false;
}

bool request_wants_close(const RequestHead& h)
{
    auto conn = h.tokens("connection");
    auto pconn = h.tokens("proxy-connection");
    if (has_token(conn, "close") || has_token(pconn, "close"))
        return true;
    if (h.version == "HTTP/1.0")
        return !has_token(conn, "keep-alive") && !has_token(pconn, "keep-alive");
    return false;
}

bool response_wants_close(const ResponseHead& h)
{
    auto conn = h.tokens("connection");
    if (has_token(conn, "close"))
        return true;
    if (h.version == "HTTP/1.0")
        return !has_token(conn, "keep-alive");
    return false;
}

std::optional<BodyFraming> request_body(const RequestHead& h)
{
    auto te = h.tokens("transfer-encoding");
    if (!te.empty()) {
        if (te.back() != "chunked")
            return std::nullopt;
        return BodyFraming{BodyKind::chunked, 0};
    }
    try {
        if (auto n = content_length(h.headers))
            return BodyFraming{*n == 0 ? BodyKind::none : BodyKind::fixed, *n};
    } catch (const std::invalid_argument&) {
        return std::nullopt;
    }
    return BodyFraming{};
}

std::optional<BodyFraming> response_body(const ResponseHead& h, std::string_view request_method)
{
    if (request_method == "HEAD" || (h.status >= 100 && h.status < 200) || h.status == 204 || h.status == 304)
        return BodyFraming{};
    auto te = h.tokens("transfer-encoding");
    if (!te.empty())
        return BodyFraming{te.back() == "chunked" ? BodyKind::chunked : BodyKind::until_close, 0};
    try {
        if (auto n = content_length(h.headers))
            return BodyFraming{*n == 0 ? BodyKind::none : BodyKind::fixed, *n};
    } catch (const std::invalid_argument&) {
        return std::nullopt;
    }
    return BodyFraming{BodyKind::until_close, 0};
}

std::string status_response(int status, std::string_view reason, std::string_view body,
                            const std::vector<Header>& extra)
{
    std::string out = fmt::format("HTTP/1.1 {} {}\r\n", status, reason);
    for (const auto& h : extra)
        out += fmt::format("{}: {}\r\n", h.name, h.value);
    out += fmt::format("Content-Type: text/plain; charset=utf-8\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                       body.size());
    out += body;
    return out;
}

} // namespace gateway::http
