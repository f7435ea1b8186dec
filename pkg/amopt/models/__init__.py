"""Policy distributions and function approximators"""
