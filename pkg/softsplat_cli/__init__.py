"""SoftSplat Sim command-line package"""
