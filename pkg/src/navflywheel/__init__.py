"""Self-improving navigation pipeline: a seeded continuous gridworld, a
trainable chunked-action policy, deviation detection against reference
trajectories, automatic correction-data generation, and an iterated
evaluate/detect/generate/retrain loop."""

__version__ = "0.1.0"
