"""Objectives, optimizers, environments, training and diagnostics"""
