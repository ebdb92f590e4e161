def half_arrived(view, clock):
    return view.arrived * 2 >= view.expected
