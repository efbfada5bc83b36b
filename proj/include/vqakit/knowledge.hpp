#pragma once

// Knowledge retrieval: attribute terms become SPARQL comment queries, the
// answers come back over HTTP in the SPARQL JSON results format, and every
// passage is remembered in an append-only cache so repeat lookups cost no
// network traffic. Ranked passages are then stitched into one paragraph.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vqakit/core.hpp"

namespace vqakit::knowledge {

// Connection failures and persistent non-200 statuses.
struct NetworkError : std::runtime_error {
  explicit NetworkError(const std::string& what) : std::runtime_error(what) {}
};

// A 200 response whose body is not a usable SPARQL JSON result.
struct MalformedResponse : std::runtime_error {
  explicit MalformedResponse(const std::string& what) : std::runtime_error(what) {}
};

struct SparqlQuery {
  std::string text;
  std::string term;
};

struct KnowledgePassage {
  std::string term;
  std::string comment;
  std::string source;      // endpoint URL, or "cache" when served locally
  std::string fetched_at;  // RFC 3339, UTC
  bool not_found = false;  // endpoint had no binding for the term
};

struct KnowledgeParagraph {
  std::string text;
  std::vector<std::string> term_order;
  bool all_empty = false;  // downstream substitutes a zero knowledge vector
};

inline std::string rfc3339_now() {
  const std::time_t tt = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Terms come from the attribute vocabulary: lowercase words, digits, spaces
// and hyphens only.
inline void validate_term(const std::string& term) {
  VQAKIT_REQUIRE(!term.empty(), "knowledge: term must be nonempty");
  for (char ch : term) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') ||
                    ch == ' ' || ch == '-';
    if (!ok)
      throw ContractViolation("knowledge: term '" + term +
                              "' has characters outside [a-z0-9 space hyphen]");
  }
}

// "stop sign" -> "Stop_Sign": capitalize each space-separated word, then
// join with underscores.
inline std::string resource_name(const std::string& term) {
  validate_term(term);
  std::string out;
  bool word_start = true;
  for (char ch : term) {
    if (ch == ' ') {
      if (!word_start) out += '_';
      word_start = true;
      continue;
    }
    if (word_start && ch >= 'a' && ch <= 'z') {
      out += static_cast<char>(ch - 'a' + 'A');
    } else {
      out += ch;
    }
    word_start = false;
  }
  VQAKIT_REQUIRE(!out.empty(), "knowledge: term has no words");
  return out;
}

// Byte-stable for a given term; the rendering for "dog" is pinned by the
// golden file fixtures/sparql/dog.rq.
inline SparqlQuery build_comment_query(const std::string& term) {
  SparqlQuery q;
  q.term = term;
  q.text =
      "PREFIX rdfs: <http://www.w3.org/2000/01/rdf-schema#>\n"
      "SELECT ?comment WHERE {\n"
      "  <http://dbpedia.org/resource/" + resource_name(term) + "> rdfs:comment ?comment .\n"
      "  FILTER (lang(?comment) = \"en\")\n"
      "}\n";
  return q;
}

inline std::string url_encode(const std::string& s) {
  std::string out;
  for (unsigned char ch : s) {
    const bool keep = (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z') ||
                      (ch >= '0' && ch <= '9') || ch == '-' || ch == '_' ||
                      ch == '.' || ch == '~';
    if (keep) {
      out += static_cast<char>(ch);
    } else {
      char buf[4];
      std::snprintf(buf, sizeof buf, "%%%02X", ch);
      out += buf;
    }
  }
  return out;
}

// Append-only JSONL store keyed by (endpoint, term); the last record for a
// key wins on reload. Reads are concurrent, appends are serialized.
class KbCache {
 public:
  explicit KbCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in) return;  // fresh cache file is created on first append
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.contains("endpoint") || !rec.contains("term") ||
          !rec.contains("comment") || !rec.contains("not_found") || !rec.contains("fetched_at"))
        throw IoError("KbCache: malformed record at " + path_.string() + ":" +
                      std::to_string(lineno));
      KnowledgePassage p;
      p.term = rec.at("term").get<std::string>();
      p.comment = rec.at("comment").get<std::string>();
      p.not_found = rec.at("not_found").get<bool>();
      p.fetched_at = rec.at("fetched_at").get<std::string>();
      p.source = rec.at("endpoint").get<std::string>();
      map_[{rec.at("endpoint").get<std::string>(), p.term}] = std::move(p);
    }
  }

  const std::filesystem::path& path() const { return path_; }

  std::optional<KnowledgePassage> lookup(const std::string& endpoint,
                                         const std::string& term) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = map_.find({endpoint, term});
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  // term-only view for offline consumers that take a cached passage from
  // whichever endpoint produced it (first by endpoint order)
  std::optional<KnowledgePassage> lookup_term(const std::string& term) const {
    std::lock_guard<std::mutex> lock(mu_);
    for (const auto& [key, passage] : map_)
      if (key.second == term) return passage;
    return std::nullopt;
  }

  void put(const std::string& endpoint, const KnowledgePassage& passage) {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json rec;
    rec["endpoint"] = endpoint;
    rec["term"] = passage.term;
    rec["comment"] = passage.comment;
    rec["not_found"] = passage.not_found;
    rec["fetched_at"] = passage.fetched_at;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("KbCache: cannot append to " + path_.string());
    out << rec.dump() << '\n';
    map_[{endpoint, passage.term}] = passage;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return map_.size();
  }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, KnowledgePassage> map_;
};

struct FetchPolicy {
  int max_retries = 3;           // extra attempts after the first failure
  int backoff_initial_ms = 100;  // doubles on every retry
  int timeout_sec = 10;
  std::function<std::string()> now = rfc3339_now;
  std::function<void(int)> sleep_ms = [](int ms) {
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
  };
};

namespace detail {

struct EndpointParts {
  std::string base;  // scheme://host[:port]
  std::string path;  // leading slash, never empty
};

inline EndpointParts split_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  VQAKIT_REQUIRE(scheme != std::string::npos, "knowledge: endpoint needs a scheme");
  const auto slash = endpoint.find('/', scheme + 3);
  EndpointParts parts;
  if (slash == std::string::npos) {
    parts.base = endpoint;
    parts.path = "/";
  } else {
    parts.base = endpoint.substr(0, slash);
    parts.path = endpoint.substr(slash);
  }
  VQAKIT_REQUIRE(parts.base.size() > scheme + 3, "knowledge: endpoint needs a host");
  return parts;
}

}  // namespace detail

// One GET per cache miss. The SPARQL JSON answer's first binding of the
// `comment` variable wins; zero bindings is a cachable NotFound, not an
// error. Network failures and non-200 statuses are retried with exponential
// backoff; a malformed 200 body fails immediately (the server answered, it
// will not answer differently next time).
inline KnowledgePassage fetch_comment(const std::string& endpoint, const SparqlQuery& query,
                                      KbCache& cache, const FetchPolicy& policy = {}) {
  if (std::optional<KnowledgePassage> hit = cache.lookup(endpoint, query.term)) {
    hit->source = "cache";
    return *hit;
  }

  const detail::EndpointParts parts = detail::split_endpoint(endpoint);
  const std::string target = parts.path + "?query=" + url_encode(query.text);

  std::string last_error;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    if (attempt > 0) policy.sleep_ms(policy.backoff_initial_ms << (attempt - 1));

    httplib::Client client(parts.base);
    client.set_connection_timeout(policy.timeout_sec, 0);
    client.set_read_timeout(policy.timeout_sec, 0);
    httplib::Result res = client.Get(target, {{"Accept", "application/sparql-results+json"}});
    if (!res) {
      last_error = "no response (" + httplib::to_string(res.error()) + ")";
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }

    nlohmann::json body = nlohmann::json::parse(res->body, nullptr, false);
    if (body.is_discarded() || !body.contains("results") ||
        !body.at("results").contains("bindings") || !body.at("results").at("bindings").is_array())
      throw MalformedResponse("knowledge: endpoint returned an unusable body for term '" +
                              query.term + "'");

    const nlohmann::json& bindings = body.at("results").at("bindings");
    KnowledgePassage passage;
    passage.term = query.term;
    passage.source = endpoint;
    passage.fetched_at = policy.now();
    if (bindings.empty()) {
      passage.not_found = true;
    } else {
      const nlohmann::json& first = bindings.at(0);
      if (!first.contains("comment") || !first.at("comment").contains("value") ||
          !first.at("comment").at("value").is_string())
        throw MalformedResponse("knowledge: binding lacks a string comment value for term '" +
                                query.term + "'");
      passage.comment = first.at("comment").at("value").get<std::string>();
    }
    cache.put(endpoint, passage);
    return passage;
  }

  throw NetworkError("knowledge: giving up on term '" + query.term + "' after " +
                     std::to_string(policy.max_retries + 1) + " attempts: " + last_error);
}

// Fetches one passage per term, at most max_concurrent in flight. Results
// keep the input order; the first failure (in term order) is rethrown.
inline std::vector<KnowledgePassage> fetch_terms(const std::string& endpoint,
                                                 const std::vector<std::string>& terms,
                                                 KbCache& cache, const FetchPolicy& policy = {},
                                                 std::size_t max_concurrent = 4) {
  VQAKIT_REQUIRE(max_concurrent > 0, "fetch_terms: need at least one lane");
  std::vector<KnowledgePassage> out(terms.size());
  std::vector<std::exception_ptr> errors(terms.size());

  for (std::size_t start = 0; start < terms.size(); start += max_concurrent) {
    const std::size_t stop = std::min(terms.size(), start + max_concurrent);
    std::vector<std::thread> lanes;
    for (std::size_t i = start; i < stop; ++i) {
      lanes.emplace_back([&, i]() {
        try {
          out[i] = fetch_comment(endpoint, build_comment_query(terms[i]), cache, policy);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (std::thread& t : lanes) t.join();
  }

  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// Joins the non-empty comments with single spaces, best-ranked first.
inline KnowledgeParagraph assemble_paragraph(const std::vector<KnowledgePassage>& passages) {
  VQAKIT_REQUIRE(!passages.empty(), "assemble_paragraph: need at least one passage");
  KnowledgeParagraph para;
  for (const KnowledgePassage& p : passages) {
    para.term_order.push_back(p.term);
    if (p.comment.empty()) continue;
    if (!para.text.empty()) para.text += ' ';
    para.text += p.comment;
  }
  para.all_empty = para.text.empty();
  return para;
}

// Tests and offline runs may redirect every fetch through this variable.
inline constexpr const char* kEndpointEnvVar = "VQAKIT_KB_ENDPOINT";

inline std::string effective_endpoint(const std::string& configured) {
  const char* env = std::getenv(kEndpointEnvVar);
  if (env != nullptr && env[0] != '\0') return env;
  return configured;
}

}  // namespace vqakit::knowledge
