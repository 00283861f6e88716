"""Model-based continuous-time policy evaluation for Levy jump-diffusions."""
