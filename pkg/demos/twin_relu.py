"""Two identical ReLUs with opposite output weights: f(x) = relu(x) - relu(x) = 0.

Linear bounds alone bottom out at -1 even with every neuron split, because the
leaves (POS, NEG) and (NEG, POS) have no input but look feasible neuron by
neuron.  The LP sees both split rows on the same x and rules them out.
"""
from relubab import fixtures
from relubab.bab import VerifierConfig, verify
from relubab.model import load_network, load_property

net = load_network(fixtures.path("twin_relu", "net"))
prop = load_property(fixtures.path("twin_relu", "prop"))

for name, cfg in [("no LP", VerifierConfig(disable_lp_fallback=True)), ("with LP", VerifierConfig())]:
    v = verify(net, prop, cfg)
    print(f"{name:8s} {v.status.value:26s} f_lb={v.f_lb:+.3f} branches={v.stats.branches} "
          f"lp_calls={v.stats.lp_calls} infeasible leaves={v.stats.infeasible_leaves}")
