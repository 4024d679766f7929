"""Why maximizing a reward that is 1 on expert pairs recovers the expert.

On a 5-state chain the expert walks right and then stays at the far end by
stepping right into the wall.  We build the sparse reward (1 on pairs the
expert visits, 0 elsewhere), solve for the reward-maximizing policy and
compare discounted occupancy measures.  Then we drop expert states from the
end of the data and watch the recovered policy drift.
"""

import numpy as np

from ditto.tabular import (
    chain_mdp, deterministic_policy, occupancy, rprime_check, solve_intrinsic, sparse_reward_table, support_pairs,
    tv_distance,
)

mdp = chain_mdp(5, gamma=0.9)
expert = deterministic_policy([1, 1, 1, 1, 1], 2)
rho_e = occupancy(mdp, expert)
pairs = support_pairs(rho_e)
print("expert occupancy by state:", np.round(rho_e.sum(1), 4))
print("expert pairs:", sorted(pairs))

reward = sparse_reward_table(rho_e.shape, pairs)
ok, _ = rprime_check(reward, pairs, eps=1.0)
print("sparse reward admissible with eps = 1:", ok)

policy, values = solve_intrinsic(mdp, reward)
rho = occupancy(mdp, policy)
print("recovered actions:", policy.argmax(1).tolist())
print("TV distance to the expert occupancy: %.2e" % tv_distance(rho, rho_e))

# a reward that pays 0.999 off the data is not admissible at eps = 0.01
leaky = np.where(reward == 1.0, 1.0, 0.999)
print("leaky reward admissible with eps = 0.01:", rprime_check(leaky, pairs, eps=0.01)[0])

print("\ncoverage  TV(learner, expert)")
order = [(s, 1) for s in range(5)]
for k in range(1, 6):
    covered = set(order[:k])
    policy, _ = solve_intrinsic(mdp, sparse_reward_table(rho_e.shape, covered))
    print(f"{k:8d}  {tv_distance(occupancy(mdp, policy), rho_e):.4f}")
