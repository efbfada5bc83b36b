#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vqakit/knowledge.hpp"

using namespace vqakit;
using namespace vqakit::knowledge;

namespace {

std::filesystem::path scratch_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "vqakit_kb_test";
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path fresh_cache_path(const std::string& name) {
  const auto p = scratch_dir() / name;
  std::filesystem::remove(p);
  return p;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Scripted SPARQL endpoint. Serves canned comments by resource name,
// counts every request, and can be told to fail the next N requests.
class MockEndpoint {
 public:
  MockEndpoint() {
    server_.Get("/sparql", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      if (fail_next > 0) {
        --fail_next;
        res.status = 500;
        res.set_content("busy", "text/plain");
        return;
      }
      const std::string query = req.get_param_value("query");
      last_query = query;
      last_accept = req.get_header_value("Accept");

      const std::string resource = extract_resource(query);
      if (bodies_.count(resource)) {  // literal body override for fault injection
        res.set_content(bodies_.at(resource), "application/sparql-results+json");
        return;
      }
      nlohmann::json body;
      body["head"]["vars"] = {"comment"};
      body["results"]["bindings"] = nlohmann::json::array();
      if (comments_.count(resource)) {
        nlohmann::json binding;
        binding["comment"]["type"] = "literal";
        binding["comment"]["xml:lang"] = "en";
        binding["comment"]["value"] = comments_.at(resource);
        body["results"]["bindings"].push_back(binding);
      }
      res.set_content(body.dump(), "application/sparql-results+json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this]() { server_.listen_after_bind(); });
    while (!server_.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }

  ~MockEndpoint() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/sparql"; }

  void serve(const std::string& resource, const std::string& comment) {
    comments_[resource] = comment;
  }
  void serve_body(const std::string& resource, const std::string& raw_body) {
    bodies_[resource] = raw_body;
  }

  std::atomic<int> requests{0};
  std::atomic<int> fail_next{0};
  std::string last_query;
  std::string last_accept;

 private:
  static std::string extract_resource(const std::string& query) {
    const std::string prefix = "<http://dbpedia.org/resource/";
    const auto start = query.find(prefix);
    if (start == std::string::npos) return "";
    const auto stop = query.find('>', start);
    if (stop == std::string::npos) return "";
    return query.substr(start + prefix.size(), stop - start - prefix.size());
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::map<std::string, std::string> comments_;
  std::map<std::string, std::string> bodies_;
};

// Instant, recorded backoff and a frozen clock keep tests fast and stable.
FetchPolicy test_policy(std::vector<int>* sleeps = nullptr, int max_retries = 3) {
  FetchPolicy p;
  p.max_retries = max_retries;
  p.backoff_initial_ms = 100;
  p.now = []() { return std::string("2026-01-01T00:00:00Z"); };
  p.sleep_ms = [sleeps](int ms) {
    if (sleeps) sleeps->push_back(ms);
  };
  return p;
}

}  // namespace

TEST_CASE("resource names capitalize words and join with underscores") {
  CHECK(resource_name("dog") == "Dog");
  CHECK(resource_name("stop sign") == "Stop_Sign");
  CHECK(resource_name("traffic light pole") == "Traffic_Light_Pole");
  CHECK(resource_name("stop-sign") == "Stop-sign");
  CHECK(resource_name("route 66") == "Route_66");
  CHECK(resource_name("a  b") == "A_B");
}

TEST_CASE("terms outside the attribute charset are rejected") {
  CHECK_THROWS_AS(build_comment_query(""), ContractViolation);
  CHECK_THROWS_AS(build_comment_query("Dog"), ContractViolation);
  CHECK_THROWS_AS(build_comment_query("dog!"), ContractViolation);
  CHECK_THROWS_AS(build_comment_query("dog\ncat"), ContractViolation);
  CHECK_THROWS_AS(build_comment_query("caf\xC3\xA9"), ContractViolation);
  CHECK_THROWS_AS(build_comment_query(" "), ContractViolation);
}

TEST_CASE("the dog query matches the golden file byte for byte") {
  const SparqlQuery q = build_comment_query("dog");
  CHECK(q.term == "dog");
  CHECK(q.text == slurp(std::filesystem::path(VQAKIT_REPO_DIR) / "fixtures" / "sparql" / "dog.rq"));
}

TEST_CASE("query rendering is deterministic and term-dependent only") {
  CHECK(build_comment_query("dog").text == build_comment_query("dog").text);
  CHECK(build_comment_query("dog").text != build_comment_query("cat").text);
  const SparqlQuery q = build_comment_query("stop sign");
  CHECK(q.text.find("<http://dbpedia.org/resource/Stop_Sign>") != std::string::npos);
  CHECK(q.text.find("?comment") != std::string::npos);
}

TEST_CASE("url encoding keeps unreserved bytes and escapes the rest") {
  CHECK(url_encode("abcXYZ019-_.~") == "abcXYZ019-_.~");
  CHECK(url_encode("a b") == "a%20b");
  CHECK(url_encode("a\nb") == "a%0Ab");
  CHECK(url_encode("?=&") == "%3F%3D%26");
}

TEST_CASE("endpoint splitting separates base and path") {
  auto parts = knowledge::detail::split_endpoint("http://127.0.0.1:8890/sparql");
  CHECK(parts.base == "http://127.0.0.1:8890");
  CHECK(parts.path == "/sparql");
  parts = knowledge::detail::split_endpoint("http://host.example");
  CHECK(parts.base == "http://host.example");
  CHECK(parts.path == "/");
  CHECK_THROWS_AS(knowledge::detail::split_endpoint("host/sparql"), ContractViolation);
}

TEST_CASE("a found comment is fetched once and then served from cache") {
  MockEndpoint mock;
  mock.serve("Dog", "The domestic dog is a domesticated canid.");
  KbCache cache(fresh_cache_path("found.jsonl"));

  KnowledgePassage p = fetch_comment(mock.url(), build_comment_query("dog"), cache, test_policy());
  CHECK(p.comment == "The domestic dog is a domesticated canid.");
  CHECK(p.term == "dog");
  CHECK(p.source == mock.url());
  CHECK(p.fetched_at == "2026-01-01T00:00:00Z");
  CHECK(!p.not_found);
  CHECK(mock.requests == 1);
  CHECK(mock.last_accept == "application/sparql-results+json");
  CHECK(mock.last_query == build_comment_query("dog").text);

  for (int i = 0; i < 3; ++i) {
    KnowledgePassage hit = fetch_comment(mock.url(), build_comment_query("dog"), cache, test_policy());
    CHECK(hit.comment == p.comment);
    CHECK(hit.source == "cache");
  }
  CHECK(mock.requests == 1);
}

TEST_CASE("zero bindings become a cached NotFound passage") {
  MockEndpoint mock;
  KbCache cache(fresh_cache_path("notfound.jsonl"));

  KnowledgePassage p = fetch_comment(mock.url(), build_comment_query("unicorn"), cache, test_policy());
  CHECK(p.not_found);
  CHECK(p.comment.empty());
  CHECK(mock.requests == 1);

  KnowledgePassage again = fetch_comment(mock.url(), build_comment_query("unicorn"), cache, test_policy());
  CHECK(again.not_found);
  CHECK(again.source == "cache");
  CHECK(mock.requests == 1);
}

TEST_CASE("two failures then success records two backoff sleeps") {
  MockEndpoint mock;
  mock.serve("Dog", "canid");
  mock.fail_next = 2;
  KbCache cache(fresh_cache_path("retry.jsonl"));
  std::vector<int> sleeps;

  KnowledgePassage p = fetch_comment(mock.url(), build_comment_query("dog"), cache,
                                     test_policy(&sleeps, 3));
  CHECK(p.comment == "canid");
  CHECK(mock.requests == 3);
  CHECK(sleeps == std::vector<int>{100, 200});
}

TEST_CASE("persistent server errors raise a network error after the retry budget") {
  MockEndpoint mock;
  mock.serve("Dog", "canid");
  mock.fail_next = 50;
  KbCache cache(fresh_cache_path("exhaust.jsonl"));
  std::vector<int> sleeps;

  CHECK_THROWS_AS(fetch_comment(mock.url(), build_comment_query("dog"), cache,
                                test_policy(&sleeps, 2)),
                  NetworkError);
  CHECK(mock.requests == 3);
  CHECK(sleeps == std::vector<int>{100, 200});
  CHECK(cache.size() == 0);
}

TEST_CASE("an unreachable endpoint raises a network error") {
  KbCache cache(fresh_cache_path("refused.jsonl"));
  std::vector<int> sleeps;
  CHECK_THROWS_AS(fetch_comment("http://127.0.0.1:1/sparql", build_comment_query("dog"), cache,
                                test_policy(&sleeps, 1)),
                  NetworkError);
  CHECK(sleeps == std::vector<int>{100});
}

TEST_CASE("malformed 200 bodies fail immediately with a distinct error") {
  MockEndpoint mock;
  mock.serve_body("Garbled", "{oops");
  mock.serve_body("Halfbaked", "{\"results\": {}}");
  mock.serve_body("Nocomment",
                  "{\"results\": {\"bindings\": [{\"other\": {\"value\": \"x\"}}]}}");
  KbCache cache(fresh_cache_path("malformed.jsonl"));

  CHECK_THROWS_AS(fetch_comment(mock.url(), build_comment_query("garbled"), cache, test_policy()),
                  MalformedResponse);
  CHECK(mock.requests == 1);  // no retries for a server that answered
  CHECK_THROWS_AS(fetch_comment(mock.url(), build_comment_query("halfbaked"), cache, test_policy()),
                  MalformedResponse);
  CHECK_THROWS_AS(fetch_comment(mock.url(), build_comment_query("nocomment"), cache, test_policy()),
                  MalformedResponse);
  CHECK(cache.size() == 0);

  // Not cached: the next attempt asks the server again.
  const int before = mock.requests;
  CHECK_THROWS_AS(fetch_comment(mock.url(), build_comment_query("garbled"), cache, test_policy()),
                  MalformedResponse);
  CHECK(mock.requests == before + 1);
}

TEST_CASE("multiple bindings: the first one wins") {
  MockEndpoint mock;
  mock.serve_body("Dog",
                  "{\"results\": {\"bindings\": ["
                  "{\"comment\": {\"value\": \"first\"}},"
                  "{\"comment\": {\"value\": \"second\"}}]}}");
  KbCache cache(fresh_cache_path("firstwins.jsonl"));
  KnowledgePassage p = fetch_comment(mock.url(), build_comment_query("dog"), cache, test_policy());
  CHECK(p.comment == "first");
}

TEST_CASE("cache reload reproduces passages bit-exactly and avoids the network") {
  MockEndpoint mock;
  mock.serve("Dog", "canid \xC3\xA9lan");  // non-ASCII survives the round trip
  const auto path = fresh_cache_path("roundtrip.jsonl");
  {
    KbCache cache(path);
    fetch_comment(mock.url(), build_comment_query("dog"), cache, test_policy());
    fetch_comment(mock.url(), build_comment_query("unicorn"), cache, test_policy());
    CHECK(cache.size() == 2);
  }
  CHECK(mock.requests == 2);

  KbCache reloaded(path);
  CHECK(reloaded.size() == 2);
  auto dog = reloaded.lookup(mock.url(), "dog");
  REQUIRE(dog.has_value());
  CHECK(dog->comment == "canid \xC3\xA9lan");
  CHECK(dog->fetched_at == "2026-01-01T00:00:00Z");
  CHECK(!dog->not_found);
  auto unicorn = reloaded.lookup(mock.url(), "unicorn");
  REQUIRE(unicorn.has_value());
  CHECK(unicorn->not_found);

  KnowledgePassage warm = fetch_comment(mock.url(), build_comment_query("dog"), reloaded, test_policy());
  CHECK(warm.source == "cache");
  CHECK(mock.requests == 2);
}

TEST_CASE("the last cache record for a key wins") {
  const auto path = fresh_cache_path("lastwins.jsonl");
  {
    std::ofstream out(path);
    out << R"({"endpoint":"http://e/sparql","term":"dog","comment":"old","not_found":false,"fetched_at":"2026-01-01T00:00:00Z"})"
        << '\n'
        << R"({"endpoint":"http://e/sparql","term":"dog","comment":"new","not_found":false,"fetched_at":"2026-01-02T00:00:00Z"})"
        << '\n';
  }
  KbCache cache(path);
  CHECK(cache.size() == 1);
  auto hit = cache.lookup("http://e/sparql", "dog");
  REQUIRE(hit.has_value());
  CHECK(hit->comment == "new");
  CHECK(hit->fetched_at == "2026-01-02T00:00:00Z");
}

TEST_CASE("a corrupt cache line is rejected on load") {
  const auto path = fresh_cache_path("corrupt.jsonl");
  {
    std::ofstream out(path);
    out << "{broken\n";
  }
  CHECK_THROWS_AS(KbCache cache(path), IoError);

  const auto missing_field = fresh_cache_path("missingfield.jsonl");
  {
    std::ofstream out(missing_field);
    out << R"({"endpoint":"http://e/sparql","term":"dog"})" << '\n';
  }
  CHECK_THROWS_AS(KbCache cache(missing_field), IoError);
}

TEST_CASE("paragraph assembly joins ranked non-empty passages with spaces") {
  auto mk = [](const std::string& term, const std::string& comment) {
    KnowledgePassage p;
    p.term = term;
    p.comment = comment;
    return p;
  };

  KnowledgeParagraph joined = assemble_paragraph({mk("x", "a"), mk("y", ""), mk("z", "b")});
  CHECK(joined.text == "a b");
  CHECK(joined.term_order == std::vector<std::string>{"x", "y", "z"});
  CHECK(!joined.all_empty);

  CHECK(assemble_paragraph({mk("solo", "only passage")}).text == "only passage");

  KnowledgeParagraph empty = assemble_paragraph({mk("x", ""), mk("y", "")});
  CHECK(empty.text.empty());
  CHECK(empty.all_empty);
  CHECK(empty.term_order == std::vector<std::string>{"x", "y"});

  const std::vector<std::string> comments{"alpha", "bravo", "charlie", "delta", "echo"};
  std::vector<KnowledgePassage> five;
  std::string oracle;
  for (std::size_t i = 0; i < comments.size(); ++i) {
    five.push_back(mk("t" + std::to_string(i), comments[i]));
    if (i) oracle += ' ';
    oracle += comments[i];
  }
  CHECK(assemble_paragraph(five).text == oracle);

  CHECK_THROWS_AS(assemble_paragraph({}), ContractViolation);
}

TEST_CASE("batched fetches preserve term order and only miss once per term") {
  MockEndpoint mock;
  mock.serve("Dog", "canid");
  mock.serve("Cat", "felid");
  mock.serve("Horse", "equid");
  KbCache cache(fresh_cache_path("batch.jsonl"));

  const std::vector<std::string> terms{"dog", "cat", "unicorn", "horse", "griffin"};
  std::vector<KnowledgePassage> got = fetch_terms(mock.url(), terms, cache, test_policy(), 4);
  REQUIRE(got.size() == 5);
  CHECK(got[0].comment == "canid");
  CHECK(got[1].comment == "felid");
  CHECK(got[2].not_found);
  CHECK(got[3].comment == "equid");
  CHECK(got[4].not_found);
  CHECK(mock.requests == 5);

  std::vector<KnowledgePassage> warm = fetch_terms(mock.url(), terms, cache, test_policy(), 4);
  CHECK(mock.requests == 5);
  for (const KnowledgePassage& p : warm) CHECK(p.source == "cache");

  CHECK_THROWS_AS(fetch_terms(mock.url(), {"dog", "Dog"}, cache, test_policy()), ContractViolation);
}

TEST_CASE("the endpoint environment variable overrides the configured URL") {
  unsetenv(kEndpointEnvVar);
  CHECK(effective_endpoint("http://configured/sparql") == "http://configured/sparql");
  setenv(kEndpointEnvVar, "http://override/sparql", 1);
  CHECK(effective_endpoint("http://configured/sparql") == "http://override/sparql");
  setenv(kEndpointEnvVar, "", 1);
  CHECK(effective_endpoint("http://configured/sparql") == "http://configured/sparql");
  unsetenv(kEndpointEnvVar);
}
