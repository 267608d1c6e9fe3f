"""densctl: density control of leader-follower systems on periodic domains.

Submodules
----------
grid        periodic meshes, discrete calculus, CSV field format
kernels     interaction kernel evaluators (1D closed forms, 2D periodized)
targets     von Mises target densities
metrics     error norms and KL divergence
feasibility steady-state analysis: mass interval, synthesis, stability
macro_sim   forward-Euler PDE integrator with closed-loop leader control
micro_sim   agent-based twin (SDE followers, controlled leaders, KDE bridge)
lemma_ode   scalar comparison ODE: equilibria, basin estimate, integration
cli         `densctl` command line front end and experiment modes
"""

__version__ = "0.1.0"
