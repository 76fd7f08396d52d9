"""Particle-in-cell simulation of a dilute spray in a viscous incompressible fluid.

Particles feel a linear drag toward the local fluid velocity and are absorbed
at the walls; the fluid feels the opposite force.  The package monitors the
energy decay, the concentration of velocities at zero and the limiting
spatial profile of the particles.
"""
__version__ = "0.1.0"
