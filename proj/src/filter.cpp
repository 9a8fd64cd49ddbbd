#include "gateway/filter.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace gateway {

namespace {

bool label_char(char c)
{
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
}

} // namespace

bool is_normalized_domain(std::string_view s)
{
    if (s.empty() || s.size() > 253 || s.front() == '.' || s.back() == '.')
        return false;
    if (Ipv4Address::parse(s))
        return true;
    bool prev_dot = false;
    for (char c : s) {
        if (c == '.') {
            if (prev_dot)
                return false;
            prev_dot = true;
            continue;
        }
        if (!label_char(c))
            return false;
        prev_dot = false;
    }
    return true;
}

std::optional<std::string> normalize_domain(std::string_view raw)
{
    std::string s = to_lower(trim(raw));
    if (!s.empty() && s.front() == '.')
        s.erase(0, 1);
    if (!s.empty() && s.back() == '.')
        s.pop_back();
    if (!is_normalized_domain(s))
        return std::nullopt;
    return s;
}

void validate_rules(const FilterRuleSet& rules)
{
    for (const auto& d : rules.blocked_domains) {
        if (!is_normalized_domain(d))
            throw FilterError(d, fmt::format("blocked domain '{}' is not normalized", d));
    }
    for (auto p : rules.blocked_ports) {
        if (p == 0)
            throw FilterError("0", "blocked port 0 is not a TCP port");
    }
    for (const auto& [name, domains] : rules.presets) {
        for (const auto& d : domains) {
            if (!is_normalized_domain(d))
                throw FilterError(d, fmt::format("preset '{}' domain '{}' is not normalized", name, d));
        }
    }
    for (const auto& name : rules.enabled_presets) {
        if (!rules.presets.contains(name))
            throw FilterError(name, fmt::format("unknown preset '{}'", name));
    }
}

std::optional<std::string> matching_domain_rule(std::string_view host, const FilterRuleSet& rules)
{
    auto lookup = [&](std::string_view candidate) -> std::optional<std::string> {
        std::string key(candidate);
        if (rules.blocked_domains.contains(key))
            return key;
        for (const auto& name : rules.enabled_presets) {
            auto it = rules.presets.find(name);
            if (it == rules.presets.end())
                continue;
            for (const auto& d : it->second) {
                if (d == key)
                    return key;
            }
        }
        return std::nullopt;
    };

    if (Ipv4Address::parse(host))
        return lookup(host);

    std::string_view suffix = host;
    for (;;) {
        if (auto hit = lookup(suffix))
            return hit;
        auto dot = suffix.find('.');
        if (dot == std::string_view::npos)
            return std::nullopt;
        suffix.remove_prefix(dot + 1);
    }
}

std::map<std::string, std::vector<std::string>> parse_presets(const nlohmann::json& doc)
{
    if (!doc.is_object())
        throw FilterError("", "preset document must be a JSON object");
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [name, list] : doc.items()) {
        if (!list.is_array())
            throw FilterError(name, fmt::format("preset '{}' must be an array of domains", name));
        auto& domains = out[name];
        for (const auto& entry : list) {
            if (!entry.is_string())
                throw FilterError(name, fmt::format("preset '{}' contains a non-string entry", name));
            auto d = normalize_domain(entry.get<std::string>());
            if (!d)
                throw FilterError(entry.get<std::string>(),
                                  fmt::format("preset '{}' domain '{}' is invalid", name, entry.get<std::string>()));
            domains.push_back(*d);
        }
    }
    return out;
}

std::map<std::string, std::vector<std::string>> load_presets_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw FilterError(path, fmt::format("cannot open preset file '{}'", path));
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        throw FilterError(path, fmt::format("preset file '{}': {}", path, e.what()));
    }
    return parse_presets(doc);
}

void to_json(nlohmann::json& j, const FilterRuleSet& rules)
{
    j = nlohmann::json{{"blocked_domains", rules.blocked_domains},
                       {"blocked_ports", rules.blocked_ports},
                       {"presets", rules.presets},
                       {"enabled_presets", rules.enabled_presets}};
}

FilterRuleSet rules_from_json(const nlohmann::json& j,
                              const std::map<std::string, std::vector<std::string>>& known_presets)
{
    if (!j.is_object())
        throw FilterError("", "filter rules must be a JSON object");
    FilterRuleSet rules;
    if (auto it = j.find("blocked_domains"); it != j.end()) {
        for (const auto& d : *it) {
            if (!d.is_string())
                throw FilterError(d.dump(), "blocked_domains entries must be strings");
            auto s = d.get<std::string>();
            if (!is_normalized_domain(s))
                throw FilterError(s, fmt::format("blocked domain '{}' is not normalized", s));
            rules.blocked_domains.insert(s);
        }
    }
    if (auto it = j.find("blocked_ports"); it != j.end()) {
        for (const auto& p : *it) {
            if (!p.is_number_integer() || p.get<long long>() < 1 || p.get<long long>() > 65535)
                throw FilterError(p.dump(), fmt::format("blocked port {} is not a TCP port", p.dump()));
            rules.blocked_ports.insert(static_cast<std::uint16_t>(p.get<int>()));
        }
    }
    if (auto it = j.find("presets"); it != j.end())
        rules.presets = parse_presets(*it);
    else
        rules.presets = known_presets;
    if (auto it = j.find("enabled_presets"); it != j.end()) {
        for (const auto& n : *it) {
            if (!n.is_string())
                throw FilterError(n.dump(), "enabled_presets entries must be strings");
            rules.enabled_presets.insert(n.get<std::string>());
        }
    }
    validate_rules(rules);
    return rules;
}

} // namespace gateway
