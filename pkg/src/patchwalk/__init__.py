"""patchwalk: sequential patch selection + local enhancement for image restoration.

A recurrent policy walks an image in T steps, each step choosing a variable
sized box; a small convolutional enhancer restores the boxed region.  The two
networks are trained jointly: the enhancer with per-step L2 regression, the
policy with a terminal REINFORCE reward built from the PSNR gain over a
reference restorer plus a coverage bonus.
"""

__version__ = "0.1.0"
