"""amopt - direct and iterative amortized policy optimization toolkit"""
__version__ = "1.0.0"
