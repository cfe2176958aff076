import jax

# exact atomic identities are checked at 1e-10 and below
jax.config.update("jax_enable_x64", True)

__version__ = '0.1.0'
