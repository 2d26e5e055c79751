"""|x - 0.3| - 0.2 style network: unsafe near x = 0.3, found and checked by forward pass."""
from relubab import fixtures
from relubab.bab import verify
from relubab.model import forward, load_network, load_property

net = load_network(fixtures.path("shifted_abs", "net"))
prop = load_property(fixtures.path("shifted_abs", "prop"))
v = verify(net, prop)
print(v.status.value, "witness", v.witness, "f(witness)", forward(net, v.witness), "exit code", v.exit_code)
