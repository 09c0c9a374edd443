#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "kalrecon/constraints.hpp"
#include "kalrecon/synth.hpp"
#include "support/expect.hpp"
#include "support/fuzz.hpp"

using namespace kalrecon;
using kalrecon::testkit::adversarial_session;
using kalrecon::testkit::compliant_session;
using kalrecon::testkit::random_session;

namespace {

Rule named_rule(const std::string& id) {
  Rule r;
  r.id = id;
  return r;
}

std::set<std::string> rules_of(const std::vector<Violation>& vs) {
  std::set<std::string> out;
  for (const auto& v : vs) out.insert(v.rule);
  return out;
}

PacketSequence one_good_packet() {
  std::mt19937_64 rng(1);
  auto s = compliant_session(rng, 1);
  s.resize(1);
  s[0].time_since = 0.0;
  return s;
}

}  // namespace

TEST(Validate, CompliantSessionsHaveNoRepairableViolations) {
  std::mt19937_64 rng(2);
  const auto spec = ConstraintSpec::defaults();
  for (int i = 0; i < 500; ++i) EXPECT_EQ(count_repairable(validate(compliant_session(rng), spec), spec), 0u);
}

TEST(Validate, SyntheticCorpusIsClean) {
  GeneratorConfig gc;
  gc.sessions = 100;
  for (const auto& s : group_sessions(generate(gc))) EXPECT_TRUE(validate(s.packets).empty());
}

TEST(Rules, TimeGoingBackwardsIsHeldAtRunningMax) {
  auto s = one_good_packet();
  s.resize(4, s[0]);
  s[1].time_since = 0.5;
  s[2].time_since = 0.2;
  s[3].time_since = 0.7;
  EXPECT_EQ(rules_of(validate(s)), std::set<std::string>{"R1"});
  const auto r = enforce(s);
  EXPECT_EQ(r.session[2].time_since, 0.5);
  EXPECT_EQ(r.session[3].time_since, 0.7);
  ASSERT_EQ(r.violations.size(), 1u);
  EXPECT_EQ(r.violations[0].packet, 2u);
}

TEST(Rules, NonFiniteTimeIsRepaired) {
  auto s = one_good_packet();
  s.resize(2, s[0]);
  s[0].time_since = std::numeric_limits<double>::quiet_NaN();
  s[1].time_since = std::numeric_limits<double>::infinity();
  const auto r = enforce(s);
  EXPECT_EQ(r.session[0].time_since, 0.0);
  EXPECT_EQ(r.session[1].time_since, 0.0);
}

TEST(Rules, LengthIsRecomputedFromHeaderWords) {
  auto s = one_good_packet();
  auto& p = s[0].packet;
  p.ip_ihl = 5;
  p.tcp_dataofs = 8;
  p.payload_size = 100;
  p.ip_len = 7;
  p.ip_chksum = compute_ip_checksum(p);
  const auto r = enforce(s);
  EXPECT_EQ(r.session[0].packet.ip_len, 20 + 32 + 100);
  // R5 follows R4, so the checksum reflects the new length.
  EXPECT_EQ(r.session[0].packet.ip_chksum, compute_ip_checksum(r.session[0].packet));
  EXPECT_EQ(rules_of(r.violations).count("R4"), 1u);
}

TEST(Rules, SynWithFinOrRstKeepsSyn) {
  auto s = one_good_packet();
  s[0].packet.tcp_flags = TcpFlags{};
  s[0].packet.tcp_flags.syn = s[0].packet.tcp_flags.rst = s[0].packet.tcp_flags.fin = true;
  const auto r = enforce(s);
  EXPECT_TRUE(r.session[0].packet.tcp_flags.syn);
  EXPECT_FALSE(r.session[0].packet.tcp_flags.fin);
  EXPECT_FALSE(r.session[0].packet.tcp_flags.rst);
}

TEST(Rules, UrgentPointerWithoutUrgIsCleared) {
  auto s = one_good_packet();
  s[0].packet.tcp_flags.urg = false;
  s[0].packet.tcp_urgptr = 9;
  EXPECT_EQ(enforce(s).session[0].packet.tcp_urgptr, 0);
}

TEST(Rules, OutOfRangeHeaderWordsAreClampedBeforeLength) {
  auto s = one_good_packet();
  auto& p = s[0].packet;
  p.ip_ihl = 2;
  p.tcp_dataofs = 40;
  p.payload_size = 0xffffffffu;
  const auto r = enforce(s);
  const auto& q = r.session[0].packet;
  EXPECT_EQ(q.ip_ihl, 5);
  EXPECT_EQ(q.tcp_dataofs, 15);
  EXPECT_EQ(q.payload_size, 0xffffu - 20u - 60u);
  EXPECT_EQ(q.ip_len, 0xffff);
  EXPECT_FALSE(packet_invariant_violation(q).has_value());
}

TEST(Rules, EndpointsFollowTheMajorityPair) {
  std::mt19937_64 rng(3);
  auto s = compliant_session(rng, 16);
  while (s.size() < 3) s = compliant_session(rng, 16);
  auto& odd = s[1];
  odd.packet.src_port ^= 0x100;
  EXPECT_EQ(rules_of(validate(s)), std::set<std::string>{"R10"});
  const auto r = enforce(s);
  ASSERT_EQ(r.violations.size(), 1u);
  EXPECT_EQ(r.violations[0].packet, 1u);
  const auto want = rules::oriented(s[0]);
  for (const auto& sp : r.session) EXPECT_EQ(rules::oriented(sp), want);
}

TEST(Rules, OpeningWithoutSynIsOnlyReported) {
  auto s = one_good_packet();
  s[0].packet.tcp_flags.syn = false;
  const auto spec = ConstraintSpec::defaults();
  const auto r = enforce(s, spec);
  EXPECT_EQ(r.session, s);
  ASSERT_EQ(r.violations.size(), 1u);
  EXPECT_EQ(r.violations[0].rule, "R9");
  EXPECT_FALSE(r.violations[0].repaired.has_value());
  EXPECT_FALSE(spec.is_repairable("R9"));
}

TEST(RuleSet, DisabledRulesAreSkipped) {
  auto s = one_good_packet();
  s[0].packet.ip_version = 6;
  auto spec = ConstraintSpec::defaults();
  spec.set_enabled("R2", false);
  EXPECT_TRUE(rules_of(validate(s, spec)).count("R2") == 0);
  EXPECT_EQ(enforce(s, spec).session[0].packet.ip_version, 6);
  EXPECT_ERRC(spec.set_enabled("R99", true), Errc::ConfigInvalid);
  EXPECT_ERRC(ConstraintSpec(std::vector<Rule>(2, named_rule("X"))), Errc::ConfigInvalid);
}

TEST(Enforce, SoundIdempotentAndFixedPointOnFuzzedSessions) {
  std::mt19937_64 rng(4);
  const auto spec = ConstraintSpec::defaults();
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_session(rng);
    const auto once = enforce(s, spec);
    ASSERT_EQ(count_repairable(validate(once.session, spec), spec), 0u) << "case " << i;
    const auto twice = enforce(once.session, spec);
    ASSERT_EQ(twice.session, once.session) << "case " << i;
    ASSERT_EQ(count_repairable(twice.violations, spec), 0u);
  }
  for (int i = 0; i < 500; ++i) {
    const auto s = compliant_session(rng);
    EXPECT_EQ(enforce(s, spec).session, s);
  }
}

TEST(Enforce, RepairsOnlyTouchReportedPackets) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto s = adversarial_session(rng);
    const auto r = enforce(s);
    std::set<std::size_t> touched;
    for (const auto& v : r.violations) {
      if (v.repaired) touched.insert(v.packet);
    }
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (!touched.count(k)) {
        EXPECT_TRUE(r.session[k] == s[k] || std::isnan(s[k].time_since)) << "packet " << k;
      }
    }
  }
}

TEST(Enforce, RepairedSessionsSerialize) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    for (const auto& sp : enforce(adversarial_session(rng)).session) {
      EXPECT_FALSE(packet_invariant_violation(sp.packet).has_value());
    }
  }
}

TEST(ViolationsCsv, OneRowPerViolation) {
  const auto path = std::filesystem::temp_directory_path() / "kalrecon_violations_test.csv";
  write_violations_csv({{3, {"R4", 1, "7", "152"}}, {3, {"R9", 0, "flags=16", std::nullopt}}}, path);
  std::ifstream in(path);
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  std::filesystem::remove(path);
  EXPECT_EQ(header, "rule,session,packet,before,after");
  EXPECT_EQ(a, "R4,3,1,7,152");
  EXPECT_EQ(b, "R9,3,0,flags=16,");
}
