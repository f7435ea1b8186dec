"""Configuration, errors, persistence and the differentiation engine"""
