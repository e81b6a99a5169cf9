#pragma once

// Every tunable constant of the CAGE-lite simulator lives here.
//
// The reference scenario publishes only the shape of its reward signal
// (penalty groups) and three baseline returns over 30 steps against the
// B_line attacker: sleep -218.65, random -154.06, rule-based heuristic -58.83.
// The values below were tuned so the native simulator lands all three
// baselines within +/-25% of those figures and never emits a reward outside
// the documented groups {0}, {-1.0}, [-1.2,-1.1], [-3.2,-2.0], [-14,-11].

#include <cstddef>

namespace forge::calibration {

inline constexpr int kEpisodeSteps = 30;

// Published 30-step baseline returns the simulator is calibrated against.
inline constexpr double kReferenceSleep = -218.65;
inline constexpr double kReferenceRandom = -154.06;
inline constexpr double kReferenceHeuristic = -58.83;
inline constexpr double kReferenceTolerance = 0.25;

// Observation channel.
inline constexpr double kFalsePositiveRate = 0.05;
inline constexpr double kFalseNegativeRate = 0.10;

// Blue action effects.
inline constexpr double kAnalyseRevealProb = 0.95;
inline constexpr double kRemoveSuccessProb = 0.75;

// Scripted attacker: every kill-chain action succeeds with this probability.
// Decoys are not consumed: a honeypot keeps absorbing exploit attempts on its
// host until the host is restored.
inline constexpr double kAttackSuccessProb = 0.80;

// Operational costs. Only Restore carries a cost; Analyse/Remove/Decoy are
// free so that every composite reward stays inside the penalty groups
// (any non-zero cost for them would produce values such as -0.1 or -3.3).
inline constexpr double kRestoreCost = -1.0;
inline constexpr double kAnalyseCost = 0.0;
inline constexpr double kRemoveCost = 0.0;
inline constexpr double kDecoyCost = 0.0;

// Compromise penalties, by worst compromised tier.
// small: attacker holds a user workstation.
inline constexpr double kUserAccessPenalty = -1.1;
inline constexpr double kUserRootPenalty = -1.2;
// moderate: enterprise or operational subnet breached, [-2.2, -2.0].
inline constexpr double kInnerBreachPenalty = -2.0;
inline constexpr double kInnerRootSurcharge = -0.1;
inline constexpr double kOpServerUserSurcharge = -0.1;
// severe: root on the operational server, [-13, -11]. Grows with every
// consecutive impact step, capped.
inline constexpr double kOpServerRootPenalty = -11.0;
inline constexpr double kImpactSurcharge = -0.25;
inline constexpr int kImpactSurchargeCap = 4;

// Scripted heuristic baseline: a host is re-analysed at most once per this
// many steps.
inline constexpr int kHeuristicReanalyseGap = 7;

}  // namespace forge::calibration
