#pragma once

#include "gateway/common.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace gateway {

/// Blocked domain suffixes and ports, plus named presets that can be switched on as a group.
struct FilterRuleSet {
    std::set<std::string> blocked_domains;
    std::set<std::uint16_t> blocked_ports;
    std::map<std::string, std::vector<std::string>> presets;
    std::set<std::string> enabled_presets;

    friend bool operator==(const FilterRuleSet&, const FilterRuleSet&) = default;
};

class FilterError : public std::runtime_error {
public:
    FilterError(std::string entry, const std::string& message)
        : std::runtime_error(message), entry_(std::move(entry)) {}
    const std::string& entry() const { return entry_; }

private:
    std::string entry_;
};

/// Lowercases and strips a single leading/trailing dot. nullopt if the result is not a
/// plausible domain (empty labels, characters outside [a-z0-9-_]) or IPv4 literal.
std::optional<std::string> normalize_domain(std::string_view raw);
bool is_normalized_domain(std::string_view s);

/// Throws FilterError naming the first non-normalized domain or unknown enabled preset.
void validate_rules(const FilterRuleSet& rules);

/// The rule entry that blocks `host`, if any. Exact or dot-boundary suffix match; IPv4
/// literals match exact entries only. Enabled presets are unioned with blocked_domains.
std::optional<std::string> matching_domain_rule(std::string_view host, const FilterRuleSet& rules);

inline bool domain_blocked(std::string_view host, const FilterRuleSet& rules)
{
    return matching_domain_rule(host, rules).has_value();
}

inline bool port_blocked(std::uint16_t port, const FilterRuleSet& rules)
{
    return rules.blocked_ports.contains(port);
}

/// Preset file: JSON object of preset name -> array of domains.
std::map<std::string, std::vector<std::string>> parse_presets(const nlohmann::json& doc);
std::map<std::string, std::vector<std::string>> load_presets_file(const std::string& path);

void to_json(nlohmann::json& j, const FilterRuleSet& rules);
/// Parses the API representation; presets are taken from `known_presets` when the document has none.
FilterRuleSet rules_from_json(const nlohmann::json& j, const std::map<std::string, std::vector<std::string>>& known_presets);

} // namespace gateway
