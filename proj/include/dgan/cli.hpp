#pragma once

#include <nlohmann/json.hpp>

#include <ostream>
#include <string>
#include <vector>

namespace dgan::cli {

inline constexpr int kConfigVersion = 1;

enum class Kind { text, path, u64, f64, boolean, u64_list, f64_list, path_list };

// One flag of one subcommand. The flag `--batch-pixels` reads the config key
// `batch_pixels` from the subcommand's section of the config file.
struct OptionSpec {
    std::string key;
    Kind kind = Kind::text;
    nlohmann::json fallback; // null: unset
    std::string help;
    bool required = false;
};

struct CommandSpec {
    std::string name;
    std::string help;
    std::vector<OptionSpec> options;
};

// Every subcommand, including the options shared by all of them
// (`workers`).
const std::vector<CommandSpec>& commands();

std::string flag_name(const std::string& key);

// Effective configuration: flag, then config file section, then default.
// `flags` holds raw flag text by key. Throws ConfigError naming the key.
nlohmann::json resolve(const CommandSpec& command, const nlohmann::json& file,
                       const std::vector<std::pair<std::string, std::string>>& flags);

// args excludes the program name. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace dgan::cli
