"""Discrete-event simulation of the edge loss network.

Import from the submodules (``engine``, ``graph``); the package itself stays
empty so that the compiled adaptive hooks can import ``sim.state`` directly.
"""
