"""One-layer linear self-attention trained on in-context regression prompts.

The package checks that the global minimiser of the pre-training loss is one
step of (preconditioned) gradient descent, both through closed-form
constructions and through trained models.
"""

__version__ = "0.1.0"
