"""Goal inference on spatial graphs: a hierarchical belief/desire/intention
VAE, inverse-planning and neural baselines, a pedestrian simulator, and the
evaluation experiments that compare them."""

__version__ = "0.1.0"
