"""swarmsynth: deterministic multi-drone cooperative-perception simulator.

Drones observe a synthetic voxel world, exchange compact semantic messages
over a simulated multi-hop network, hallucinate unobserved views with a
federated conditional diffusion generator, and fuse them into local voxel
radiance fields, with byte-exact accounting of everything transmitted.
"""

__version__ = "0.1.0"
