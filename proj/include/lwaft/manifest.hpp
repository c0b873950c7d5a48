#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"

namespace lwaft {

inline constexpr int manifest_version = 1;
inline constexpr const char* tool_version = "0.1.0";
inline constexpr const char* manifest_file = "manifest.json";

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct ArtifactRef {
    std::string name;
    std::string path; // relative to the run directory for outputs
    std::string sha256;
};

/// Provenance record written once per output directory.
struct RunManifest {
    std::string run_id;
    std::string command;
    std::string config_ini;
    std::map<std::string, std::uint64_t> seeds;
    std::vector<ArtifactRef> inputs;
    std::vector<ArtifactRef> outputs;
    std::map<std::string, std::string> notes;
    std::string started_at;
    std::string finished_at;
    int version = manifest_version;

    void add_input(const std::string& name, const std::filesystem::path& path) {
        inputs.push_back({name, std::filesystem::absolute(path).lexically_normal().string(), sha256_file(path)});
    }

    /// `path` is relative to `run_dir`.
    void add_output(const std::string& name, const std::filesystem::path& run_dir, const std::string& path) {
        outputs.push_back({name, path, sha256_file(run_dir / path)});
    }

    [[nodiscard]] const ArtifactRef* output(const std::string& name) const {
        for (const auto& o : outputs) {
            if (o.name == name) {
                return &o;
            }
        }
        return nullptr;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        const auto refs = [](const std::vector<ArtifactRef>& v) {
            nlohmann::json a = nlohmann::json::array();
            for (const auto& r : v) {
                a.push_back({{"name", r.name}, {"path", r.path}, {"sha256", r.sha256}});
            }
            return a;
        };
        return {{"manifest_version", version},
                {"run_id", run_id},
                {"command", command},
                {"tool_version", tool_version},
                {"config", config_ini},
                {"config_sha256", sha256_hex(config_ini)},
                {"seeds", seeds},
                {"inputs", refs(inputs)},
                {"outputs", refs(outputs)},
                {"notes", notes},
                {"started_at", started_at},
                {"finished_at", finished_at}};
    }

    static RunManifest from_json(const nlohmann::json& j) {
        RunManifest m;
        try {
            m.version = j.at("manifest_version").get<int>();
            if (m.version != manifest_version) {
                throw ValidationError("manifest version " + std::to_string(m.version) + " is not supported (expected " +
                                      std::to_string(manifest_version) + ")");
            }
            m.run_id = j.at("run_id").get<std::string>();
            m.command = j.at("command").get<std::string>();
            m.config_ini = j.at("config").get<std::string>();
            m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
            const auto refs = [](const nlohmann::json& a) {
                std::vector<ArtifactRef> v;
                for (const auto& r : a) {
                    v.push_back({r.at("name").get<std::string>(), r.at("path").get<std::string>(),
                                 r.at("sha256").get<std::string>()});
                }
                return v;
            };
            m.inputs = refs(j.at("inputs"));
            m.outputs = refs(j.at("outputs"));
            m.notes = j.value("notes", std::map<std::string, std::string>{});
            m.started_at = j.at("started_at").get<std::string>();
            m.finished_at = j.at("finished_at").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("manifest: ") + e.what());
        }
        return m;
    }

    void save(const std::filesystem::path& run_dir) const {
        write_file_text(run_dir / manifest_file, to_json().dump(2) + "\n");
    }
};

inline RunManifest load_manifest(const std::filesystem::path& run_dir) {
    const auto path = run_dir / manifest_file;
    if (!std::filesystem::exists(path)) {
        throw ValidationError("no manifest in " + run_dir.string());
    }
    try {
        return RunManifest::from_json(nlohmann::json::parse(read_file_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

/// Recomputes every recorded hash. Returns one line per missing or changed artifact.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& run_dir) {
    const auto m = load_manifest(run_dir);
    std::vector<std::string> problems;
    const auto check = [&](const ArtifactRef& r, const std::filesystem::path& path) {
        if (!std::filesystem::exists(path)) {
            problems.push_back(r.name + ": missing " + path.string());
        } else if (sha256_file(path) != r.sha256) {
            problems.push_back(r.name + ": hash mismatch for " + path.string());
        }
    };
    for (const auto& r : m.inputs) {
        check(r, r.path);
    }
    for (const auto& r : m.outputs) {
        check(r, run_dir / r.path);
    }
    return problems;
}

} // namespace lwaft
